//! Attention-based control policy and its exact Jacobians.
//!
//! The network embeds the agent pose (`AP_FC1`, `AP_FC2`) and each padded
//! target slot (`LI_FC1`, `LI_FC2`), pools the target embeddings by masked
//! dot-product attention against the pose embedding, and maps the
//! concatenated pose embedding and attention context through two output
//! layers to a forward velocity and a yaw rate. Both are squashed into their
//! configured ranges by a scaled logistic, which keeps the whole map smooth.
//!
//! Masked slots are assigned a logit of -1e30 before the softmax, so their
//! attention weight underflows to exactly zero and padding cannot leak into
//! the output for any sign of the raw logits.
//!
//! Backward passes are hand-written reverse accumulation over the cached
//! activations; one pass per active output yields the parameter Jacobian and
//! the input Jacobian simultaneously.

use crate::belief::TargetBelief;
use crate::error::{Error, Result};
use crate::liegroup::{logmap, Pose, Twist};
use nalgebra::{DMatrix, Vector6};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

/// Twist rows driven by the two network outputs: forward velocity and yaw
/// rate. All other rows are identically zero.
pub const ACTIVE_TWIST_ROWS: [usize; 2] = [0, 5];

/// Logit assigned to masked slots before the softmax.
const MASKED_LOGIT: f64 = -1e30;

/// Layer widths and input dimensions of the policy network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyLayout {
    pub n_y: usize,
    pub n_l_max: usize,
    pub ap_fc1: usize,
    pub ap_fc2: usize,
    pub li_fc1: usize,
    pub li_fc2: usize,
    pub out_fc1: usize,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct LayerSpec {
    w_off: usize,
    b_off: usize,
    rows: usize,
    cols: usize,
}

impl LayerSpec {
    fn end(&self) -> usize {
        self.b_off + self.rows
    }
}

impl PolicyLayout {
    /// Widths used by the full-size experiments: 32, 32, 64, 32, 64, 2.
    pub fn full(n_y: usize, n_l_max: usize) -> Self {
        PolicyLayout { n_y, n_l_max, ap_fc1: 32, ap_fc2: 32, li_fc1: 64, li_fc2: 32, out_fc1: 64 }
    }

    /// Small layout (200 parameters for `n_y = 2`) used by the gradient
    /// verification suite.
    pub fn tiny(n_y: usize, n_l_max: usize) -> Self {
        PolicyLayout { n_y, n_l_max, ap_fc1: 4, ap_fc2: 4, li_fc1: 8, li_fc2: 4, out_fc1: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_y < 2 {
            return Err(Error::InvalidConfig("target state dimension must be at least 2".into()));
        }
        if self.n_l_max == 0 {
            return Err(Error::InvalidConfig("n_l_max must be at least 1".into()));
        }
        if self.ap_fc2 != self.li_fc2 {
            return Err(Error::InvalidConfig(
                "pose and target embedding widths must match for the attention product".into(),
            ));
        }
        for (name, w) in [
            ("ap_fc1", self.ap_fc1),
            ("ap_fc2", self.ap_fc2),
            ("li_fc1", self.li_fc1),
            ("li_fc2", self.li_fc2),
            ("out_fc1", self.out_fc1),
        ] {
            if w == 0 {
                return Err(Error::InvalidConfig(format!("layer {name} must have at least 1 unit")));
            }
        }
        Ok(())
    }

    pub fn vech_len(&self) -> usize {
        self.n_y * (self.n_y + 1) / 2
    }

    fn li_in(&self) -> usize {
        self.n_y + self.vech_len()
    }

    /// [ap1, ap2, li1, li2, out1, out2] with contiguous offsets.
    fn layers(&self) -> [LayerSpec; 6] {
        let dims: [(usize, usize); 6] = [
            (self.ap_fc1, 6),
            (self.ap_fc2, self.ap_fc1),
            (self.li_fc1, self.li_in()),
            (self.li_fc2, self.li_fc1),
            (self.out_fc1, self.ap_fc2 + self.li_fc2),
            (2, self.out_fc1),
        ];
        let mut specs = [LayerSpec { w_off: 0, b_off: 0, rows: 0, cols: 0 }; 6];
        let mut off = 0;
        for (i, (rows, cols)) in dims.into_iter().enumerate() {
            specs[i] = LayerSpec { w_off: off, b_off: off + rows * cols, rows, cols };
            off = specs[i].end();
        }
        specs
    }

    pub fn n_params(&self) -> usize {
        self.layers()[5].end()
    }
}

static PARAMS_VERSION: AtomicU64 = AtomicU64::new(1);

fn next_version() -> u64 {
    PARAMS_VERSION.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector with layout metadata and attention temperature.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub layout: PolicyLayout,
    pub alpha: f64,
    theta: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// Glorot-uniform weights, zero biases, deterministic in the seed.
    pub fn init_random(layout: PolicyLayout, alpha: f64, seed: u64) -> Result<Self> {
        layout.validate()?;
        if !(alpha > 0.0) {
            return Err(Error::InvalidConfig("attention temperature must be positive".into()));
        }
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, 0, crate::rng::Purpose::ParamInit);
        let mut theta = vec![0.0; layout.n_params()];
        for spec in layout.layers() {
            let limit = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
            for w in theta[spec.w_off..spec.w_off + spec.rows * spec.cols].iter_mut() {
                *w = rng.random_range(-limit..limit);
            }
        }
        Ok(PolicyParams { layout, alpha, theta, version: next_version() })
    }

    pub fn from_parts(layout: PolicyLayout, alpha: f64, theta: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if theta.len() != layout.n_params() {
            return Err(Error::InvalidConfig(format!(
                "parameter vector length {} does not match the layout ({})",
                theta.len(),
                layout.n_params()
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidConfig("attention temperature must be positive".into()));
        }
        Ok(PolicyParams { layout, alpha, theta, version: next_version() })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    /// Mutable access invalidates outstanding forward caches.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.version = next_version();
        &mut self.theta
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }
}

/// Control bounds enforced by the output squashing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
}

impl ControlBounds {
    pub fn validate(&self) -> Result<()> {
        if self.v_min >= self.v_max || self.omega_min >= self.omega_max {
            return Err(Error::InvalidConfig("control bounds must satisfy min < max".into()));
        }
        Ok(())
    }
}

impl Default for ControlBounds {
    /// v in [0, 4] m/s, omega in [-pi/3, pi/3] rad/s.
    fn default() -> Self {
        ControlBounds {
            v_min: 0.0,
            v_max: 4.0,
            omega_min: -std::f64::consts::FRAC_PI_3,
            omega_max: std::f64::consts::FRAC_PI_3,
        }
    }
}

/// Network input: pose log-coordinates plus zero-padded target slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub pose_log: Vector6<f64>,
    /// `n_l_max * n_y`, row per slot, zero beyond `n_l`.
    pub target_means: Vec<f64>,
    /// `n_l_max * vech_len`, upper-triangular row-major half-vectorization.
    pub target_infos: Vec<f64>,
    pub mask: Vec<bool>,
    pub n_l: usize,
    pub n_y: usize,
}

/// Upper-triangular row-major half-vectorization of a symmetric matrix.
fn vech_into(info: &nalgebra::DMatrix<f64>, out: &mut [f64]) {
    let n = info.nrows();
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = info[(i, j)];
            k += 1;
        }
    }
}

/// Assembles the padded, masked network input from the agent pose and the
/// per-target predicted beliefs.
pub fn build_input(t: &Pose, beliefs: &[TargetBelief], n_l_max: usize) -> Result<PolicyInput> {
    let n_l = beliefs.len();
    if n_l > n_l_max {
        return Err(Error::TooManyTargets { given: n_l, max: n_l_max });
    }
    assert!(n_l >= 1, "at least one target is required");
    let n_y = beliefs[0].dim();
    let vech_len = n_y * (n_y + 1) / 2;
    let pose_log = logmap(t)?;
    let mut target_means = vec![0.0; n_l_max * n_y];
    let mut target_infos = vec![0.0; n_l_max * vech_len];
    let mut mask = vec![false; n_l_max];
    for (j, b) in beliefs.iter().enumerate() {
        debug_assert_eq!(b.dim(), n_y);
        target_means[j * n_y..(j + 1) * n_y].copy_from_slice(b.mean.as_slice());
        vech_into(&b.info, &mut target_infos[j * vech_len..(j + 1) * vech_len]);
        mask[j] = true;
    }
    Ok(PolicyInput { pose_log, target_means, target_infos, mask, n_l, n_y })
}

/// All intermediate activations of one forward pass, retained for the
/// backward passes.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_version: u64,
    input: PolicyInput,
    ap1_pre: Vec<f64>,
    ap1_act: Vec<f64>,
    ap2_pre: Vec<f64>,
    emb_a: Vec<f64>,
    li1_pre: Vec<f64>,
    li1_act: Vec<f64>,
    li2_pre: Vec<f64>,
    emb_l: Vec<f64>,
    attn: Vec<f64>,
    ctx: Vec<f64>,
    out1_pre: Vec<f64>,
    out1_act: Vec<f64>,
    sig: [f64; 2],
    bounds: ControlBounds,
    pub u: Twist,
}

impl ForwardCache {
    /// Attention weight of each slot (zero for masked slots).
    pub fn attention(&self) -> &[f64] {
        &self.attn
    }
}

#[inline]
fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dense(theta: &[f64], spec: &LayerSpec, x: &[f64], pre: &mut [f64]) {
    for r in 0..spec.rows {
        let row = &theta[spec.w_off + r * spec.cols..spec.w_off + (r + 1) * spec.cols];
        let mut acc = theta[spec.b_off + r];
        for (w, xi) in row.iter().zip(x.iter()) {
            acc += w * xi;
        }
        pre[r] = acc;
    }
}

fn relu(pre: &[f64], act: &mut [f64]) {
    for (a, p) in act.iter_mut().zip(pre.iter()) {
        *a = p.max(0.0);
    }
}

/// Forward pass: returns the bounded twist `[v, 0, 0, 0, 0, omega]` and the
/// cache needed by [`jacobians`].
pub fn forward(input: &PolicyInput, params: &PolicyParams, bounds: &ControlBounds) -> (Twist, ForwardCache) {
    let layout = &params.layout;
    debug_assert_eq!(input.n_y, layout.n_y);
    debug_assert_eq!(input.mask.len(), layout.n_l_max);
    let [ap1, ap2, li1, li2, out1, out2] = layout.layers();
    let theta = params.theta();
    let n_slots = layout.n_l_max;
    let vech_len = layout.vech_len();
    let li_in = layout.li_in();

    // Pose embedding.
    let pose_in: [f64; 6] = input.pose_log.into();
    let mut ap1_pre = vec![0.0; ap1.rows];
    dense(theta, &ap1, &pose_in, &mut ap1_pre);
    let mut ap1_act = vec![0.0; ap1.rows];
    relu(&ap1_pre, &mut ap1_act);
    let mut ap2_pre = vec![0.0; ap2.rows];
    dense(theta, &ap2, &ap1_act, &mut ap2_pre);
    let mut emb_a = vec![0.0; ap2.rows];
    relu(&ap2_pre, &mut emb_a);

    // Per-slot target embeddings (masked slots stay zero and never enter the
    // pooled context).
    let mut li1_pre = vec![0.0; n_slots * li1.rows];
    let mut li1_act = vec![0.0; n_slots * li1.rows];
    let mut li2_pre = vec![0.0; n_slots * li2.rows];
    let mut emb_l = vec![0.0; n_slots * li2.rows];
    let mut x_l = vec![0.0; li_in];
    let mut logits = vec![MASKED_LOGIT; n_slots];
    for s in 0..n_slots {
        if !input.mask[s] {
            continue;
        }
        x_l[..layout.n_y].copy_from_slice(&input.target_means[s * layout.n_y..(s + 1) * layout.n_y]);
        x_l[layout.n_y..].copy_from_slice(&input.target_infos[s * vech_len..(s + 1) * vech_len]);
        let pre1 = &mut li1_pre[s * li1.rows..(s + 1) * li1.rows];
        dense(theta, &li1, &x_l, pre1);
        let act1 = &mut li1_act[s * li1.rows..(s + 1) * li1.rows];
        relu(&li1_pre[s * li1.rows..(s + 1) * li1.rows], act1);
        let pre2 = &mut li2_pre[s * li2.rows..(s + 1) * li2.rows];
        dense(theta, &li2, &li1_act[s * li1.rows..(s + 1) * li1.rows], pre2);
        let act2 = &mut emb_l[s * li2.rows..(s + 1) * li2.rows];
        relu(&li2_pre[s * li2.rows..(s + 1) * li2.rows], act2);
        logits[s] = emb_a
            .iter()
            .zip(&emb_l[s * li2.rows..(s + 1) * li2.rows])
            .map(|(a, l)| a * l)
            .sum::<f64>()
            / params.alpha;
    }

    // Softmax over all slots; masked logits underflow to weight zero.
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut attn = vec![0.0; n_slots];
    let mut z_sum = 0.0;
    for s in 0..n_slots {
        let e = (logits[s] - max_logit).exp();
        attn[s] = e;
        z_sum += e;
    }
    for a in attn.iter_mut() {
        *a /= z_sum;
    }

    let mut ctx = vec![0.0; li2.rows];
    for s in 0..n_slots {
        if attn[s] == 0.0 {
            continue;
        }
        for (c, l) in ctx.iter_mut().zip(&emb_l[s * li2.rows..(s + 1) * li2.rows]) {
            *c += attn[s] * l;
        }
    }

    // Output head on [emb_a || ctx].
    let mut z = vec![0.0; ap2.rows + li2.rows];
    z[..ap2.rows].copy_from_slice(&emb_a);
    z[ap2.rows..].copy_from_slice(&ctx);
    let mut out1_pre = vec![0.0; out1.rows];
    dense(theta, &out1, &z, &mut out1_pre);
    let mut out1_act = vec![0.0; out1.rows];
    relu(&out1_pre, &mut out1_act);
    let mut raw = [0.0; 2];
    dense(theta, &out2, &out1_act, &mut raw);

    let sig = [logistic(raw[0]), logistic(raw[1])];
    let v = bounds.v_min + (bounds.v_max - bounds.v_min) * sig[0];
    let omega = bounds.omega_min + (bounds.omega_max - bounds.omega_min) * sig[1];
    let u = Twist::new(v, 0.0, 0.0, 0.0, 0.0, omega);

    let cache = ForwardCache {
        params_version: params.version,
        input: input.clone(),
        ap1_pre,
        ap1_act,
        ap2_pre,
        emb_a,
        li1_pre,
        li1_act,
        li2_pre,
        emb_l,
        attn,
        ctx,
        out1_pre,
        out1_act,
        sig,
        bounds: *bounds,
        u,
    };
    (u, cache)
}

/// Jacobians of the two bounded outputs with respect to the parameters and
/// to every input coordinate. Index 0 is the forward velocity (twist row 0),
/// index 1 the yaw rate (twist row 5).
#[derive(Debug, Clone)]
pub struct PolicyJacobians {
    pub n_p: usize,
    pub param: [Vec<f64>; 2],
    pub pose: [[f64; 6]; 2],
    /// `n_l_max * n_y` per output; zero on masked slots.
    pub means: [Vec<f64>; 2],
    /// `n_l_max * vech_len` per output; zero on masked slots.
    pub infos: [Vec<f64>; 2],
}

/// Reverse accumulation for both active outputs.
///
/// Fails with [`Error::StaleCache`] if the parameters were mutated after the
/// forward pass that produced `cache`.
pub fn jacobians(cache: &ForwardCache, params: &PolicyParams) -> Result<PolicyJacobians> {
    if cache.params_version != params.version {
        return Err(Error::StaleCache);
    }
    let layout = &params.layout;
    let [ap1, ap2, li1, li2, out1, out2] = layout.layers();
    let theta = params.theta();
    let n_p = layout.n_params();
    let n_slots = layout.n_l_max;
    let vech_len = layout.vech_len();
    let input = &cache.input;

    let mut out = PolicyJacobians {
        n_p,
        param: [vec![0.0; n_p], vec![0.0; n_p]],
        pose: [[0.0; 6]; 2],
        means: [vec![0.0; n_slots * layout.n_y], vec![0.0; n_slots * layout.n_y]],
        infos: [vec![0.0; n_slots * vech_len], vec![0.0; n_slots * vech_len]],
    };

    let ranges = [cache.bounds.v_max - cache.bounds.v_min, cache.bounds.omega_max - cache.bounds.omega_min];

    let mut x_l = vec![0.0; layout.li_in()];
    for r in 0..2 {
        let grad = &mut out.param[r];
        // d(bounded output)/d(raw output r): scaled logistic derivative.
        let seed = ranges[r] * cache.sig[r] * (1.0 - cache.sig[r]);

        // out2 (only row r participates).
        for c in 0..out2.cols {
            grad[out2.w_off + r * out2.cols + c] += seed * cache.out1_act[c];
        }
        grad[out2.b_off + r] += seed;
        let mut d_out1_pre = vec![0.0; out1.rows];
        for c in 0..out1.rows {
            if cache.out1_pre[c] > 0.0 {
                d_out1_pre[c] = seed * theta[out2.w_off + r * out2.cols + c];
            }
        }

        // out1.
        let mut d_z = vec![0.0; out1.cols];
        for row in 0..out1.rows {
            let g = d_out1_pre[row];
            if g == 0.0 {
                continue;
            }
            let w_row = &theta[out1.w_off + row * out1.cols..out1.w_off + (row + 1) * out1.cols];
            let g_row = &mut grad[out1.w_off + row * out1.cols..out1.w_off + (row + 1) * out1.cols];
            for c in 0..out1.cols {
                g_row[c] += g * if c < ap2.rows { cache.emb_a[c] } else { cache.ctx[c - ap2.rows] };
                d_z[c] += g * w_row[c];
            }
            grad[out1.b_off + row] += g;
        }
        let mut d_emb_a = d_z[..ap2.rows].to_vec();
        let d_ctx = &d_z[ap2.rows..];

        // Attention block: ctx = sum_s attn_s emb_l_s with
        // attn = softmax(logits), logits_s = emb_a . emb_l_s / alpha.
        let mut d_logit = vec![0.0; n_slots];
        let mut w_dot = 0.0;
        for s in 0..n_slots {
            if cache.attn[s] == 0.0 {
                continue;
            }
            let dw: f64 = d_ctx
                .iter()
                .zip(&cache.emb_l[s * li2.rows..(s + 1) * li2.rows])
                .map(|(d, l)| d * l)
                .sum();
            d_logit[s] = dw;
            w_dot += cache.attn[s] * dw;
        }
        for s in 0..n_slots {
            d_logit[s] = cache.attn[s] * (d_logit[s] - w_dot);
        }

        for s in 0..n_slots {
            if !input.mask[s] {
                continue;
            }
            let emb_l_s = &cache.emb_l[s * li2.rows..(s + 1) * li2.rows];
            // Gradient into the target embedding of slot s.
            let mut d_emb_l = vec![0.0; li2.rows];
            for c in 0..li2.rows {
                d_emb_l[c] = cache.attn[s] * d_ctx[c] + d_logit[s] / params.alpha * cache.emb_a[c];
                d_emb_a[c] += d_logit[s] / params.alpha * emb_l_s[c];
            }

            // li2 backward.
            let li1_act_s = &cache.li1_act[s * li1.rows..(s + 1) * li1.rows];
            let mut d_li1_act = vec![0.0; li1.rows];
            for row in 0..li2.rows {
                if cache.li2_pre[s * li2.rows + row] <= 0.0 {
                    continue;
                }
                let g = d_emb_l[row];
                if g == 0.0 {
                    continue;
                }
                let w_row = &theta[li2.w_off + row * li2.cols..li2.w_off + (row + 1) * li2.cols];
                let g_row = &mut grad[li2.w_off + row * li2.cols..li2.w_off + (row + 1) * li2.cols];
                for c in 0..li2.cols {
                    g_row[c] += g * li1_act_s[c];
                    d_li1_act[c] += g * w_row[c];
                }
                grad[li2.b_off + row] += g;
            }

            // li1 backward.
            x_l[..layout.n_y].copy_from_slice(&input.target_means[s * layout.n_y..(s + 1) * layout.n_y]);
            x_l[layout.n_y..].copy_from_slice(&input.target_infos[s * vech_len..(s + 1) * vech_len]);
            let mut d_x_l = vec![0.0; layout.li_in()];
            for row in 0..li1.rows {
                if cache.li1_pre[s * li1.rows + row] <= 0.0 {
                    continue;
                }
                let g = d_li1_act[row];
                if g == 0.0 {
                    continue;
                }
                let w_row = &theta[li1.w_off + row * li1.cols..li1.w_off + (row + 1) * li1.cols];
                let g_row = &mut grad[li1.w_off + row * li1.cols..li1.w_off + (row + 1) * li1.cols];
                for c in 0..li1.cols {
                    g_row[c] += g * x_l[c];
                    d_x_l[c] += g * w_row[c];
                }
                grad[li1.b_off + row] += g;
            }
            out.means[r][s * layout.n_y..(s + 1) * layout.n_y].copy_from_slice(&d_x_l[..layout.n_y]);
            out.infos[r][s * vech_len..(s + 1) * vech_len].copy_from_slice(&d_x_l[layout.n_y..]);
        }

        // Pose stream backward.
        let mut d_ap1_act = vec![0.0; ap1.rows];
        for row in 0..ap2.rows {
            if cache.ap2_pre[row] <= 0.0 {
                continue;
            }
            let g = d_emb_a[row];
            if g == 0.0 {
                continue;
            }
            let w_row = &theta[ap2.w_off + row * ap2.cols..ap2.w_off + (row + 1) * ap2.cols];
            let g_row = &mut grad[ap2.w_off + row * ap2.cols..ap2.w_off + (row + 1) * ap2.cols];
            for c in 0..ap2.cols {
                g_row[c] += g * cache.ap1_act[c];
                d_ap1_act[c] += g * w_row[c];
            }
            grad[ap2.b_off + row] += g;
        }
        let pose_in: [f64; 6] = input.pose_log.into();
        for row in 0..ap1.rows {
            if cache.ap1_pre[row] <= 0.0 {
                continue;
            }
            let g = d_ap1_act[row];
            if g == 0.0 {
                continue;
            }
            let w_row = &theta[ap1.w_off + row * ap1.cols..ap1.w_off + (row + 1) * ap1.cols];
            let g_row = &mut grad[ap1.w_off + row * ap1.cols..ap1.w_off + (row + 1) * ap1.cols];
            for c in 0..6 {
                g_row[c] += g * pose_in[c];
                out.pose[r][c] += g * w_row[c];
            }
            grad[ap1.b_off + row] += g;
        }
    }
    Ok(out)
}

/// Full 6 x n_p Jacobian of the twist with respect to the parameters. Rows
/// 1..=4 are identically zero.
pub fn param_jacobian(cache: &ForwardCache, params: &PolicyParams) -> Result<DMatrix<f64>> {
    let jacs = jacobians(cache, params)?;
    let mut j = DMatrix::zeros(6, jacs.n_p);
    for (r, &row) in ACTIVE_TWIST_ROWS.iter().enumerate() {
        for (i, g) in jacs.param[r].iter().enumerate() {
            j[(row, i)] = *g;
        }
    }
    Ok(j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::TargetBelief;
    use nalgebra::{dmatrix, dvector, DVector};
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_beliefs(rng: &mut ChaCha8Rng, n: usize) -> Vec<TargetBelief> {
        (0..n)
            .map(|_| {
                let mean = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
                let a = rng.random_range(0.5..3.0);
                let c = rng.random_range(0.5..3.0);
                let b = rng.random_range(-0.3..0.3);
                TargetBelief::new(mean, dmatrix![a, b; b, c])
            })
            .collect()
    }

    fn tiny_params(seed: u64, n_l_max: usize) -> PolicyParams {
        PolicyParams::init_random(PolicyLayout::tiny(2, n_l_max), 4.0, seed).unwrap()
    }

    #[test]
    fn tiny_layout_has_200_params() {
        assert_eq!(PolicyLayout::tiny(2, 4).n_params(), 200);
    }

    #[test]
    fn full_layout_param_count() {
        // 6->32->32 pose, 5->64->32 target, 64->64->2 head.
        let layout = PolicyLayout::full(2, 8);
        let expected = (6 * 32 + 32) + (32 * 32 + 32) + (5 * 64 + 64) + (64 * 32 + 32) + (64 * 64 + 64) + (64 * 2 + 2);
        assert_eq!(layout.n_params(), expected);
    }

    #[test]
    fn vech_is_upper_triangular_row_major() {
        let b = TargetBelief::new(dvector![0.0, 0.0], dmatrix![1.0, 0.4; 0.4, 3.0]);
        let input = build_input(&Pose::identity(), &[b], 2).unwrap();
        assert_eq!(&input.target_infos[..3], &[1.0, 0.4, 3.0]);
    }

    #[test]
    fn build_input_identity_pose_and_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let beliefs = random_beliefs(&mut rng, 3);
        let input = build_input(&Pose::identity(), &beliefs, 8).unwrap();
        assert!(input.pose_log.norm() < 1e-15);
        assert_eq!(input.mask, vec![true, true, true, false, false, false, false, false]);
        // Padded rows are exactly zero.
        assert!(input.target_means[6..].iter().all(|x| *x == 0.0));
        assert!(input.target_infos[9..].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn build_input_rejects_too_many_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let beliefs = random_beliefs(&mut rng, 5);
        assert!(matches!(
            build_input(&Pose::identity(), &beliefs, 4),
            Err(Error::TooManyTargets { given: 5, max: 4 })
        ));
    }

    #[test]
    fn single_target_gets_unit_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let beliefs = random_beliefs(&mut rng, 1);
        let params = tiny_params(1, 4);
        let input = build_input(&Pose::identity(), &beliefs, 4).unwrap();
        let (_, cache) = forward(&input, &params, &ControlBounds::default());
        assert_eq!(cache.attention()[0], 1.0);
        assert!(cache.attention()[1..].iter().all(|a| *a == 0.0));
    }

    #[test]
    fn padding_does_not_affect_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for _ in 0..20 {
            let beliefs = random_beliefs(&mut rng, 3);
            let theta = tiny_params(rng.random(), 4).theta().to_vec();
            let p4 = PolicyParams::from_parts(PolicyLayout::tiny(2, 4), 4.0, theta.clone()).unwrap();
            let p8 = PolicyParams::from_parts(PolicyLayout::tiny(2, 8), 4.0, theta).unwrap();
            let pose = Pose::from_planar(rng.random_range(-1.0..1.0), 0.3, 0.5);
            let i4 = build_input(&pose, &beliefs, 4).unwrap();
            let i8 = build_input(&pose, &beliefs, 8).unwrap();
            let (u4, c4) = forward(&i4, &p4, &ControlBounds::default());
            let (u8, c8) = forward(&i8, &p8, &ControlBounds::default());
            assert!((u4 - u8).norm() < 1e-12);
            // Same parameter Jacobians under either padding.
            let j4 = jacobians(&c4, &p4).unwrap();
            let j8 = jacobians(&c8, &p8).unwrap();
            for r in 0..2 {
                let diff = j4.param[r]
                    .iter()
                    .zip(&j8.param[r])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max);
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..20 {
            let mut beliefs = random_beliefs(&mut rng, 4);
            let params = tiny_params(rng.random(), 6);
            let pose = Pose::from_planar(0.2, -0.4, 1.0);
            let i1 = build_input(&pose, &beliefs, 6).unwrap();
            let (u1, _) = forward(&i1, &params, &ControlBounds::default());
            beliefs.reverse();
            beliefs.swap(1, 2);
            let i2 = build_input(&pose, &beliefs, 6).unwrap();
            let (u2, _) = forward(&i2, &params, &ControlBounds::default());
            assert!((u1 - u2).norm() < 1e-12);
        }
    }

    #[test]
    fn outputs_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let bounds = ControlBounds::default();
        for _ in 0..500 {
            let mut params = tiny_params(rng.random(), 4);
            // Scale parameters up to push the outputs towards saturation.
            let scale = rng.random_range(0.1..50.0);
            for t in params.theta_mut() {
                *t *= scale;
            }
            let n = rng.random_range(1..=4);
            let beliefs = random_beliefs(&mut rng, n);
            let pose = Pose::from_planar(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-3.0..3.0),
            );
            let input = build_input(&pose, &beliefs, 4).unwrap();
            let (u, _) = forward(&input, &params, &bounds);
            assert!(u[0] >= bounds.v_min && u[0] <= bounds.v_max);
            assert!(u[5] >= bounds.omega_min && u[5] <= bounds.omega_max);
            assert_eq!(u[1], 0.0);
            assert_eq!(u[2], 0.0);
            assert_eq!(u[3], 0.0);
            assert_eq!(u[4], 0.0);
        }
    }

    #[test]
    fn saturated_raw_outputs_approach_bounds() {
        let mut params = tiny_params(2, 4);
        let layout = params.layout;
        let n_p = layout.n_params();
        // Push the two output biases to +/- 40.
        {
            let theta = params.theta_mut();
            theta[n_p - 2] = 40.0;
            theta[n_p - 1] = -40.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let beliefs = random_beliefs(&mut rng, 2);
        let input = build_input(&Pose::identity(), &beliefs, 4).unwrap();
        let bounds = ControlBounds::default();
        let (u, _) = forward(&input, &params, &bounds);
        assert!((u[0] - bounds.v_max).abs() < 1e-10);
        assert!((u[5] - bounds.omega_min).abs() < 1e-10);
    }

    #[test]
    fn param_jacobian_rows_for_zero_twist_slots_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let params = tiny_params(3, 4);
        let beliefs = random_beliefs(&mut rng, 2);
        let input = build_input(&Pose::identity(), &beliefs, 4).unwrap();
        let (_, cache) = forward(&input, &params, &ControlBounds::default());
        let j = param_jacobian(&cache, &params).unwrap();
        for row in 1..=4 {
            assert!(j.row(row).iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let mut params = tiny_params(4, 4);
        let beliefs = random_beliefs(&mut rng, 2);
        let input = build_input(&Pose::identity(), &beliefs, 4).unwrap();
        let (_, cache) = forward(&input, &params, &ControlBounds::default());
        params.theta_mut()[0] += 1e-9;
        assert!(matches!(jacobians(&cache, &params), Err(Error::StaleCache)));
    }

    /// Central-difference oracle for both the parameter and the input
    /// Jacobians of the bounded outputs.
    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let bounds = ControlBounds::default();
        let h = 1e-5;
        for trial in 0..5 {
            let mut params = tiny_params(100 + trial, 4);
            // Freshly initialized biases are exactly zero, which can park a
            // pre-activation on the ReLU kink where finite differences are
            // meaningless; jitter every coordinate off the kinks.
            for t in params.theta_mut() {
                *t += rng.random_range(0.01..0.05);
            }
            let beliefs = random_beliefs(&mut rng, 3);
            let pose = Pose::from_planar(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.5..1.5),
            );
            let input = build_input(&pose, &beliefs, 4).unwrap();
            let (_, cache) = forward(&input, &params, &bounds);
            let jacs = jacobians(&cache, &params).unwrap();

            let n_p = params.n_params();
            for i in 0..n_p {
                let orig = params.theta()[i];
                params.theta_mut()[i] = orig + h;
                let (up, _) = forward(&input, &params, &bounds);
                params.theta_mut()[i] = orig - h;
                let (um, _) = forward(&input, &params, &bounds);
                params.theta_mut()[i] = orig;
                for (r, &row) in ACTIVE_TWIST_ROWS.iter().enumerate() {
                    let fd = (up[row] - um[row]) / (2.0 * h);
                    let an = jacs.param[r][i];
                    let tol = 1e-4 * an.abs().max(fd.abs()).max(1e-6) + 1e-9;
                    assert!((an - fd).abs() < tol, "param {i} row {row}: {an} vs {fd}");
                }
            }

            // Input Jacobian: perturb pose-log and vech coordinates.
            for k in 0..6 {
                let mut ip = input.clone();
                let mut im = input.clone();
                ip.pose_log[k] += h;
                im.pose_log[k] -= h;
                let (up, _) = forward(&ip, &params, &bounds);
                let (um, _) = forward(&im, &params, &bounds);
                for (r, &row) in ACTIVE_TWIST_ROWS.iter().enumerate() {
                    let fd = (up[row] - um[row]) / (2.0 * h);
                    let an = jacs.pose[r][k];
                    let tol = 1e-4 * an.abs().max(fd.abs()).max(1e-6) + 1e-9;
                    assert!((an - fd).abs() < tol, "pose coord {k} row {row}: {an} vs {fd}");
                }
            }
            for idx in 0..input.target_infos.len() {
                let mut ip = input.clone();
                let mut im = input.clone();
                ip.target_infos[idx] += h;
                im.target_infos[idx] -= h;
                let (up, _) = forward(&ip, &params, &bounds);
                let (um, _) = forward(&im, &params, &bounds);
                for (r, &row) in ACTIVE_TWIST_ROWS.iter().enumerate() {
                    let fd = (up[row] - um[row]) / (2.0 * h);
                    let an = jacs.infos[r][idx];
                    let tol = 1e-4 * an.abs().max(fd.abs()).max(1e-6) + 1e-9;
                    assert!((an - fd).abs() < tol, "info coord {idx} row {row}: {an} vs {fd}");
                }
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn belief_strategy() -> impl Strategy<Value = TargetBelief> {
            (
                -5.0f64..5.0,
                -5.0f64..5.0,
                0.3f64..40.0,
                0.3f64..40.0,
                -0.9f64..0.9,
            )
                .prop_map(|(x, y, a, c, r)| {
                    let b = r * (a * c).sqrt();
                    TargetBelief::new(dvector![x, y], dmatrix![a, b; b, c])
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn bounds_always_respected(
                seed in 0u64..u64::MAX,
                scale in 0.05f64..80.0,
                belief in belief_strategy(),
                x in -8.0f64..8.0,
                y in -8.0f64..8.0,
                yaw in -3.0f64..3.0,
            ) {
                let bounds = ControlBounds::default();
                let mut params = PolicyParams::init_random(PolicyLayout::tiny(2, 4), 4.0, seed).unwrap();
                for t in params.theta_mut() {
                    *t *= scale;
                }
                let input = build_input(&Pose::from_planar(x, y, yaw), &[belief], 4).unwrap();
                let (u, _) = forward(&input, &params, &bounds);
                prop_assert!(u[0] >= bounds.v_min && u[0] <= bounds.v_max);
                prop_assert!(u[5] >= bounds.omega_min && u[5] <= bounds.omega_max);
            }

            #[test]
            fn permutation_and_padding_invariance(
                seed in 0u64..u64::MAX,
                beliefs in prop::collection::vec(belief_strategy(), 1..=4),
                rot in 0usize..4,
            ) {
                let bounds = ControlBounds::default();
                let theta = PolicyParams::init_random(PolicyLayout::tiny(2, 4), 4.0, seed)
                    .unwrap()
                    .theta()
                    .to_vec();
                let p4 = PolicyParams::from_parts(PolicyLayout::tiny(2, 4), 4.0, theta.clone()).unwrap();
                let p8 = PolicyParams::from_parts(PolicyLayout::tiny(2, 8), 4.0, theta).unwrap();
                let pose = Pose::from_planar(0.3, -0.2, 0.8);

                let (u4, _) = forward(&build_input(&pose, &beliefs, 4).unwrap(), &p4, &bounds);
                let (u8, _) = forward(&build_input(&pose, &beliefs, 8).unwrap(), &p8, &bounds);
                prop_assert!((u4 - u8).norm() < 1e-12, "padding changed the output");

                let mut permuted = beliefs.clone();
                permuted.rotate_left(rot % beliefs.len().max(1));
                let (up, _) = forward(&build_input(&pose, &permuted, 4).unwrap(), &p4, &bounds);
                prop_assert!((u4 - up).norm() < 1e-12, "permutation changed the output");
            }
        }
    }

    #[test]
    fn masked_input_rows_have_zero_input_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = tiny_params(5, 6);
        let beliefs = random_beliefs(&mut rng, 2);
        let input = build_input(&Pose::identity(), &beliefs, 6).unwrap();
        let (_, cache) = forward(&input, &params, &ControlBounds::default());
        let jacs = jacobians(&cache, &params).unwrap();
        for r in 0..2 {
            assert!(jacs.means[r][2 * 2..].iter().all(|x| *x == 0.0));
            assert!(jacs.infos[r][2 * 3..].iter().all(|x| *x == 0.0));
        }
    }
}
