//! Expert-driven mixture of log-logistics.
//!
//! Shared anchor vectors are projected per expert into strictly positive
//! scale/shape parameters; per-expert mixture weights and an expert gate are
//! conditioned on the slide embedding. The head exposes two routes: a tape
//! route producing the censored negative log-likelihood (plus the gating
//! entropy term) for training, and a frozen [`SurvivalCurve`] snapshot for
//! evaluation. Both run in log space; agreement between them is pinned by
//! tests.
//!
//! Times are normalized internally by `time_scale` (the training-set median
//! event time) so the softplus-projected scales start near 1 regardless of
//! the cohort's time unit.

use crate::error::{Error, Result};
use crate::tensor::{init_range, init_uniform, NodeId, ParamId, ParamSet, Tape};
use rand::Rng;

/// Probability floor applied before logarithms, as a log-space clamp.
const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)
const MEDIAN_REL_TOL: f64 = 1e-8;
const MEDIAN_BRACKET_GUARD: f64 = 1e12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ---- log-logistic distribution ----------------------------------------

/// Log-logistic density, computed in log space. alpha is the median (scale),
/// beta the shape; all three arguments must be positive.
pub fn lld_pdf(t: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_lld_args(t, alpha, beta, true)?;
    Ok(lld_log_pdf_unchecked(t, alpha, beta).exp())
}

fn lld_log_pdf_unchecked(t: f64, alpha: f64, beta: f64) -> f64 {
    let delta = t.ln() - alpha.ln();
    beta.ln() - alpha.ln() + (beta - 1.0) * delta - 2.0 * softplus(beta * delta)
}

/// Log-logistic CDF F(t) = (t/alpha)^beta / (1 + (t/alpha)^beta), evaluated
/// as a logistic sigmoid in log-time for stability. t = 0 is allowed.
pub fn lld_cdf(t: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_lld_args(t, alpha, beta, false)?;
    if t == 0.0 {
        return Ok(0.0);
    }
    Ok(sigmoid(beta * (t.ln() - alpha.ln())))
}

fn check_lld_args(t: f64, alpha: f64, beta: f64, strict_t: bool) -> Result<()> {
    if !(alpha > 0.0) || !(beta > 0.0) {
        return Err(Error::domain(
            "log_logistic",
            format!("alpha and beta must be positive, got alpha={alpha}, beta={beta}"),
        ));
    }
    if strict_t && !(t > 0.0) {
        return Err(Error::domain("log_logistic", format!("t must be positive, got {t}")));
    }
    if !strict_t && !(t >= 0.0) {
        return Err(Error::domain(
            "log_logistic",
            format!("t must be nonnegative, got {t}"),
        ));
    }
    Ok(())
}

// ---- survival head ------------------------------------------------------

/// Learnable state of the mixture head.
#[derive(Debug, Clone)]
pub struct SurvivalHead {
    pub experts: usize,
    pub components: usize,
    pub input_dim: usize,
    /// Raw months per normalized time unit; set from the training cohort.
    pub time_scale: f64,
    p_alpha: ParamId,
    p_beta: ParamId,
    w_alpha: Vec<ParamId>,
    w_beta: Vec<ParamId>,
    mixer: Vec<ParamId>,
    gate_w: ParamId,
}

impl SurvivalHead {
    pub fn register<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        input_dim: usize,
        experts: usize,
        components: usize,
    ) -> Result<Self> {
        if experts == 0 || components == 0 || input_dim == 0 {
            return Err(Error::Contract(format!(
                "survival head needs experts, components, input_dim >= 1, got {experts}, {components}, {input_dim}"
            )));
        }
        let k = components;
        // anchors spread over (-1, 1) so the projected scales straddle
        // softplus(0) = ln 2
        let p_alpha = params.add("head.p_alpha", init_range(rng, k, 1, -1.0, 1.0));
        let p_beta = params.add("head.p_beta", init_range(rng, k, 1, -1.0, 1.0));
        let mut w_alpha = Vec::with_capacity(experts);
        let mut w_beta = Vec::with_capacity(experts);
        let mut mixer = Vec::with_capacity(experts);
        for e in 0..experts {
            w_alpha.push(params.add(format!("head.expert{e}.w_alpha"), init_uniform(rng, k, k, k)));
            w_beta.push(params.add(format!("head.expert{e}.w_beta"), init_uniform(rng, k, k, k)));
            mixer.push(params.add(
                format!("head.expert{e}.mixer"),
                init_uniform(rng, input_dim, k, input_dim),
            ));
        }
        let gate_w = params.add("head.gate", init_uniform(rng, input_dim, experts, input_dim));
        Ok(SurvivalHead {
            experts,
            components,
            input_dim,
            time_scale: 1.0,
            p_alpha,
            p_beta,
            w_alpha,
            w_beta,
            mixer,
            gate_w,
        })
    }

    pub fn set_time_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Contract(format!("time scale must be positive, got {scale}")));
        }
        self.time_scale = scale;
        Ok(())
    }

    /// Strictly positive (alpha, beta) component vectors for expert `e`,
    /// in normalized time units.
    pub fn project_anchors(&self, params: &ParamSet, e: usize) -> (Vec<f64>, Vec<f64>) {
        let k = self.components;
        let pa = &params.get(self.p_alpha).data;
        let pb = &params.get(self.p_beta).data;
        let wa = &params.get(self.w_alpha[e]).data;
        let wb = &params.get(self.w_beta[e]).data;
        let mut alphas = Vec::with_capacity(k);
        let mut betas = Vec::with_capacity(k);
        for row in 0..k {
            let sa: f64 = (0..k).map(|c| wa[row * k + c] * pa[c]).sum();
            let sb: f64 = (0..k).map(|c| wb[row * k + c] * pb[c]).sum();
            alphas.push(softplus(sa));
            betas.push(softplus(sb));
        }
        (alphas, betas)
    }

    /// Tape route for the anchor projection of expert `e`.
    pub fn project_anchors_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        e: usize,
    ) -> Result<(NodeId, NodeId)> {
        let pa = tape.param(params, self.p_alpha);
        let pb = tape.param(params, self.p_beta);
        let wa = tape.param(params, self.w_alpha[e]);
        let wb = tape.param(params, self.w_beta[e]);
        let a = tape.matmul(wa, pa)?;
        let b = tape.matmul(wb, pb)?;
        Ok((tape.softplus(a), tape.softplus(b)))
    }

    /// Softmax gate over experts for a slide embedding (plain evaluation).
    pub fn gate(&self, params: &ParamSet, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let w = &params.get(self.gate_w).data;
        let logits: Vec<f64> = (0..self.experts)
            .map(|e| (0..self.input_dim).map(|i| z[i] * w[i * self.experts + e]).sum())
            .collect();
        Ok(softmax(&logits))
    }

    /// Per-expert mixture weights over components (plain evaluation).
    pub fn mixture_weights(&self, params: &ParamSet, e: usize, z: &[f64]) -> Result<Vec<f64>> {
        self.check_z(z)?;
        let k = self.components;
        let w = &params.get(self.mixer[e]).data;
        let logits: Vec<f64> = (0..k)
            .map(|c| (0..self.input_dim).map(|i| z[i] * w[i * k + c]).sum())
            .collect();
        Ok(softmax(&logits))
    }

    fn check_z(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.input_dim {
            return Err(Error::DimMismatch {
                op: "survival_head",
                left: vec![1, z.len()],
                right: vec![1, self.input_dim],
            });
        }
        Ok(())
    }

    /// Snapshot of the predictive distribution for one slide.
    pub fn curve(&self, params: &ParamSet, z: &[f64]) -> Result<SurvivalCurve> {
        let gates = self.gate(params, z)?;
        let mut lambdas = Vec::with_capacity(self.experts);
        let mut alphas = Vec::with_capacity(self.experts);
        let mut betas = Vec::with_capacity(self.experts);
        for e in 0..self.experts {
            lambdas.push(self.mixture_weights(params, e, z)?);
            let (a, b) = self.project_anchors(params, e);
            alphas.push(a);
            betas.push(b);
        }
        Ok(SurvivalCurve {
            gates,
            lambdas,
            alphas,
            betas,
            time_scale: self.time_scale,
        })
    }

    /// Tape route: (log TPDF(t), log SPF(t)) at a raw time, both floored at
    /// the probability clamp.
    pub fn log_tpdf_spf_tape(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: NodeId,
        t_raw: f64,
    ) -> Result<(NodeId, NodeId)> {
        if !(t_raw > 0.0) {
            return Err(Error::domain("tpdf", format!("t must be positive, got {t_raw}")));
        }
        let (zr, zc) = tape.shape(z);
        if (zr, zc) != (1, self.input_dim) {
            return Err(Error::DimMismatch {
                op: "survival_head",
                left: vec![zr, zc],
                right: vec![1, self.input_dim],
            });
        }
        let k = self.components;
        let u = t_raw / self.time_scale;
        let ln_u = u.ln();

        let gate_w = tape.param(params, self.gate_w);
        let gate_logits = tape.matmul(z, gate_w)?;
        let log_g = tape.log_softmax_rows(gate_logits); // 1 x E
        let log_g_col = tape.transpose(log_g); // E x 1

        let ones_k = tape.constant(k, 1, vec![1.0; k])?;
        let ln_u_col = tape.constant(k, 1, vec![ln_u; k])?;
        let ones_k_vec = tape.constant(k, 1, vec![1.0; k])?;

        let mut pdf_terms = Vec::with_capacity(self.experts);
        let mut surv_terms = Vec::with_capacity(self.experts);
        for e in 0..self.experts {
            let (alpha, beta) = self.project_anchors_tape(tape, params, e)?;
            let log_alpha = tape.log(alpha)?;
            let log_beta = tape.log(beta)?;
            let delta = tape.sub(ln_u_col, log_alpha)?; // ln u - ln alpha
            let bd = tape.mul(beta, delta)?;
            let sp = tape.softplus(bd);

            // log pdf (normalized time) = ln b - ln a + (b-1)*delta - 2*softplus(b*delta)
            let bm1 = tape.sub(beta, ones_k_vec)?;
            let mid = tape.mul(bm1, delta)?;
            let t1 = tape.sub(log_beta, log_alpha)?;
            let t2 = tape.add(t1, mid)?;
            let sp2 = tape.scale(sp, -2.0);
            let log_pdf_norm = tape.add(t2, sp2)?;
            // raw-time density needs the 1/time_scale Jacobian
            let jac = tape.constant(k, 1, vec![-self.time_scale.ln(); k])?;
            let log_pdf = tape.add(log_pdf_norm, jac)?;

            // log survival = -softplus(b*delta); scale-free in t
            let log_surv = tape.scale(sp, -1.0);

            let mixer_w = tape.param(params, self.mixer[e]);
            let lam_logits = tape.matmul(z, mixer_w)?;
            let log_lam_row = tape.log_softmax_rows(lam_logits);
            let log_lam = tape.transpose(log_lam_row); // K x 1

            let ge = tape.gather_rows(log_g_col, &[e])?; // 1 x 1
            let ge_vec = tape.matmul(ones_k, ge)?; // K x 1 broadcast

            let w_pdf = tape.add(ge_vec, log_lam)?;
            pdf_terms.push(tape.add(w_pdf, log_pdf)?);
            surv_terms.push(tape.add(w_pdf, log_surv)?);
        }
        let all_pdf = tape.concat_rows(&pdf_terms)?;
        let all_surv = tape.concat_rows(&surv_terms)?;
        let log_tpdf = tape.logsumexp_all(all_pdf);
        let log_spf = tape.logsumexp_all(all_surv);
        Ok((
            tape.clamp_min(log_tpdf, LOG_PROB_FLOOR),
            tape.clamp_min(log_spf, LOG_PROB_FLOOR),
        ))
    }

    /// Censored negative log-likelihood on the tape.
    pub fn nll_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: NodeId,
        t_raw: f64,
        censor: u8,
    ) -> Result<NodeId> {
        if censor > 1 {
            return Err(Error::Contract(format!("censor must be 0 or 1, got {censor}")));
        }
        let (log_tpdf, log_spf) = self.log_tpdf_spf_tape(tape, params, z, t_raw)?;
        let c = censor as f64;
        let a = tape.scale(log_tpdf, -c);
        let b = tape.scale(log_spf, -(1.0 - c));
        tape.add(a, b)
    }

    /// Shannon entropy of the gate distribution on the tape.
    pub fn gate_entropy(&self, tape: &mut Tape, params: &ParamSet, z: NodeId) -> Result<NodeId> {
        let gate_w = tape.param(params, self.gate_w);
        let logits = tape.matmul(z, gate_w)?;
        let probs = tape.softmax_rows(logits);
        let logp = tape.log_softmax_rows(logits);
        let plogp = tape.mul(probs, logp)?;
        let s = tape.sum(plogp);
        Ok(tape.scale(s, -1.0))
    }

    /// Total training objective: NLL + sign * lambda_ent * entropy(gate).
    /// The default sign of -1 rewards diffuse expert usage.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        z: NodeId,
        t_raw: f64,
        censor: u8,
        lambda_ent: f64,
        entropy_sign: f64,
    ) -> Result<NodeId> {
        if lambda_ent < 0.0 {
            return Err(Error::Contract(format!(
                "lambda_ent must be nonnegative, got {lambda_ent}"
            )));
        }
        let nll = self.nll_loss(tape, params, z, t_raw, censor)?;
        if lambda_ent == 0.0 {
            return Ok(nll);
        }
        let ent = self.gate_entropy(tape, params, z)?;
        let scaled = tape.scale(ent, entropy_sign * lambda_ent);
        tape.add(nll, scaled)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&v| v / z).collect()
}

/// Shannon entropy of a distribution, with 0*log(0) = 0.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Frozen predictive distribution for one slide: an evaluable density and
/// survival function over raw time.
#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub gates: Vec<f64>,
    pub lambdas: Vec<Vec<f64>>,
    pub alphas: Vec<Vec<f64>>,
    pub betas: Vec<Vec<f64>>,
    pub time_scale: f64,
}

impl SurvivalCurve {
    /// Mixture density at raw time t > 0.
    pub fn tpdf(&self, t: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::domain("tpdf", format!("t must be positive, got {t}")));
        }
        let u = t / self.time_scale;
        let mut total = 0.0;
        for e in 0..self.gates.len() {
            for k in 0..self.lambdas[e].len() {
                let w = self.gates[e] * self.lambdas[e][k];
                if w == 0.0 {
                    continue;
                }
                total += w * lld_log_pdf_unchecked(u, self.alphas[e][k], self.betas[e][k]).exp();
            }
        }
        Ok(total / self.time_scale)
    }

    /// Mixture survival probability at raw time t >= 0.
    pub fn spf(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::domain("spf", format!("t must be nonnegative, got {t}")));
        }
        if t == 0.0 {
            return Ok(1.0);
        }
        let u = t / self.time_scale;
        let ln_u = u.ln();
        let mut total = 0.0;
        for e in 0..self.gates.len() {
            for k in 0..self.lambdas[e].len() {
                let w = self.gates[e] * self.lambdas[e][k];
                total += w * sigmoid(-self.betas[e][k] * (ln_u - self.alphas[e][k].ln()));
            }
        }
        Ok(total)
    }

    /// Raw time t* with SPF(t*) = 0.5, by bracket expansion and bisection to
    /// relative tolerance 1e-8.
    pub fn predicted_median(&self) -> Result<f64> {
        let mut hi = self.time_scale;
        let guard = MEDIAN_BRACKET_GUARD * self.time_scale;
        while self.spf(hi)? > 0.5 {
            hi *= 2.0;
            if hi > guard {
                return Err(Error::domain(
                    "predicted_median",
                    format!("no bracket below {guard}"),
                ));
            }
        }
        let mut lo = 0.0;
        while hi - lo > MEDIAN_REL_TOL * hi {
            let mid = 0.5 * (lo + hi);
            if self.spf(mid)? > 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::integrate_positive_density;
    use crate::tensor::{finite_diff_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn random_head(seed: u64, d: usize, e: usize, k: usize) -> (ParamSet, SurvivalHead) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let head = SurvivalHead::register(&mut ps, &mut rng, d, e, k).unwrap();
        (ps, head)
    }

    fn random_z(seed: u64, d: usize) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn lld_pdf_at_alpha_is_beta_over_4alpha() {
        for (a, b) in [(1.0, 1.0), (3.0, 2.5), (10.0, 0.7)] {
            let got = lld_pdf(a, a, b).unwrap();
            assert!((got - b / (4.0 * a)).abs() <= 1e-12, "a={a} b={b}: {got}");
        }
        assert!((lld_pdf(1.0, 1.0, 1.0).unwrap() - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn lld_cdf_values() {
        assert!((lld_cdf(1.0, 1.0, 5.0).unwrap() - 0.5).abs() <= 1e-15);
        assert_eq!(lld_cdf(0.0, 2.0, 3.0).unwrap(), 0.0);
        // (t/alpha)^beta = 4 -> 4/5
        assert!((lld_cdf(2.0, 1.0, 2.0).unwrap() - 0.8).abs() <= 1e-12);
        assert!(lld_pdf(0.0, 1.0, 1.0).is_err());
        assert!(lld_pdf(1.0, -1.0, 1.0).is_err());
        assert!(lld_cdf(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn lld_pdf_integrates_to_one() {
        for (a, b) in [(1.0, 1.5), (0.5, 3.0), (4.0, 0.8)] {
            let pdf = move |t: f64| lld_pdf(t, a, b).unwrap();
            let half_width = 46.0 / b + 2.0;
            let got = integrate_positive_density(&pdf, a.ln() - half_width, a.ln() + half_width, 1e-9);
            assert!((got - 1.0).abs() <= 1e-6, "a={a} b={b}: {got}");
        }
    }

    #[test]
    fn anchors_project_positive_and_zero_weights_hit_ln2() {
        let (mut ps, head) = random_head(1, 4, 3, 5);
        for e in 0..3 {
            let (a, b) = head.project_anchors(&ps, e);
            assert!(a.iter().chain(&b).all(|&v| v > 0.0));
        }
        let wa = ps.id("head.expert0.w_alpha").unwrap();
        ps.get_mut(wa).data.iter_mut().for_each(|v| *v = 0.0);
        let (a, _) = head.project_anchors(&ps, 0);
        for v in a {
            assert!((v - 2.0f64.ln()).abs() <= 1e-15);
        }
    }

    #[test]
    fn anchor_gradient_matches_finite_differences() {
        let (ps, head) = random_head(2, 3, 2, 4);
        let eval = |probe: &ParamSet| {
            let mut tape = Tape::new();
            let (a, _) = head.project_anchors_tape(&mut tape, probe, 1).unwrap();
            let s = tape.sum(a);
            tape.scalar_value(s)
        };
        let mut tape = Tape::new();
        let (a, _) = head.project_anchors_tape(&mut tape, &ps, 1).unwrap();
        let s = tape.sum(a);
        let mut ps_grad = ps.clone();
        tape.backward(s, &mut ps_grad).unwrap();

        let pid = ps.id("head.p_alpha").unwrap();
        let analytic = ps_grad.get(pid).grad.clone().unwrap();
        let theta = ps.get(pid).data.clone();
        let err = finite_diff_check(
            |t| {
                let mut probe = ps.clone();
                probe.get_mut(pid).data.copy_from_slice(t);
                eval(&probe)
            },
            &theta,
            &analytic,
            1e-5,
        );
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn gate_is_a_simplex_and_uniform_at_zero_weights() {
        let (mut ps, head) = random_head(3, 5, 4, 3);
        let z = random_z(4, 5);
        let g = head.gate(&ps, &z).unwrap();
        assert!((g.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(g.iter().all(|&v| v > 0.0));

        let gid = ps.id("head.gate").unwrap();
        ps.get_mut(gid).data.iter_mut().for_each(|v| *v = 0.0);
        let g = head.gate(&ps, &z).unwrap();
        for v in &g {
            assert!((v - 0.25).abs() <= 1e-15);
        }

        // degenerate single-expert head
        let (ps1, head1) = random_head(5, 5, 1, 3);
        let g = head1.gate(&ps1, &z).unwrap();
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn mixture_weights_form_a_simplex() {
        let (ps, head) = random_head(6, 4, 2, 7);
        let z = random_z(7, 4);
        for e in 0..2 {
            let lam = head.mixture_weights(&ps, e, &z).unwrap();
            assert_eq!(lam.len(), 7);
            assert!((lam.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(head.mixture_weights(&ps, 0, &[1.0]).is_err());
    }

    #[test]
    fn entropy_values() {
        assert!((entropy(&[0.5, 0.5]) - 2.0f64.ln()).abs() <= 1e-15);
        assert_eq!(entropy(&[1.0, 0.0]), 0.0);
        let e = entropy(&[0.25, 0.75]);
        assert!((e - 0.5623351446188083).abs() <= 1e-12, "{e}");
    }

    #[test]
    fn single_component_head_collapses_to_lld() {
        // softplus(softplus_inv(x)) == x; rig the parameters so alpha=1, beta=1
        let (mut ps, mut head) = random_head(7, 2, 1, 1);
        let inv = |y: f64| (y.exp() - 1.0).ln(); // softplus inverse
        for (name, v) in [
            ("head.p_alpha", inv(1.0)),
            ("head.p_beta", inv(1.0)),
        ] {
            let id = ps.id(name).unwrap();
            ps.get_mut(id).data[0] = v;
        }
        for name in ["head.expert0.w_alpha", "head.expert0.w_beta"] {
            let id = ps.id(name).unwrap();
            ps.get_mut(id).data[0] = 1.0;
        }
        head.set_time_scale(1.0).unwrap();
        let z = vec![0.3, -0.4];
        let curve = head.curve(&ps, &z).unwrap();
        assert!((curve.tpdf(1.0).unwrap() - 0.25).abs() <= 1e-12);
        assert!((curve.spf(0.0).unwrap() - 1.0).abs() <= 1e-15);

        // tape NLL at (t=1, c=1) equals -log(0.25)
        let mut tape = Tape::new();
        let zn = tape.constant(1, 2, z.clone()).unwrap();
        let loss = head.nll_loss(&mut tape, &ps, zn, 1.0, 1).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() <= 1e-10);

        // censored branch at tiny t is ~ -log(1) = 0
        let mut tape = Tape::new();
        let zn = tape.constant(1, 2, z.clone()).unwrap();
        let loss = head.nll_loss(&mut tape, &ps, zn, 1e-9, 0).unwrap();
        assert!(tape.scalar_value(loss).abs() <= 1e-6);

        // predicted median of a single log-logistic is alpha
        let m = curve.predicted_median().unwrap();
        assert!((m - 1.0).abs() <= 1e-6, "median {m}");
    }

    #[test]
    fn tape_and_snapshot_routes_agree() {
        let (ps, mut head) = random_head(8, 4, 3, 4);
        head.set_time_scale(7.5).unwrap();
        let z = random_z(9, 4);
        let curve = head.curve(&ps, &z).unwrap();
        for t in [0.5, 3.0, 7.5, 40.0] {
            let mut tape = Tape::new();
            let zn = tape.constant(1, 4, z.clone()).unwrap();
            let (lp, ls) = head.log_tpdf_spf_tape(&mut tape, &ps, zn, t).unwrap();
            let pdf_tape = tape.scalar_value(lp).exp();
            let spf_tape = tape.scalar_value(ls).exp();
            let pdf_snap = curve.tpdf(t).unwrap();
            let spf_snap = curve.spf(t).unwrap();
            assert!(
                (pdf_tape - pdf_snap).abs() <= 1e-10 * pdf_snap.max(1.0),
                "t={t}: {pdf_tape} vs {pdf_snap}"
            );
            assert!(
                (spf_tape - spf_snap).abs() <= 1e-10,
                "t={t}: {spf_tape} vs {spf_snap}"
            );
        }
    }

    #[test]
    fn mixture_collapse_and_convexity() {
        let (ps, head) = random_head(10, 3, 1, 4);
        let z = random_z(11, 3);
        let curve = head.curve(&ps, &z).unwrap();
        for t in [0.3, 1.0, 2.5] {
            let tp = curve.tpdf(t).unwrap();
            let comps: Vec<f64> = (0..4)
                .map(|k| lld_pdf(t, curve.alphas[0][k], curve.betas[0][k]).unwrap())
                .collect();
            let lo = comps.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(tp >= lo - 1e-12 && tp <= hi + 1e-12, "t={t}");
        }
    }

    #[test]
    fn spf_monotone_and_consistent_with_quadrature() {
        let (ps, mut head) = random_head(12, 3, 3, 4);
        head.set_time_scale(2.0).unwrap();
        let z = random_z(13, 3);
        let curve = head.curve(&ps, &z).unwrap();

        let mut prev = 1.0;
        for i in 1..=200 {
            let t = 0.1 * i as f64;
            let s = curve.spf(t).unwrap();
            assert!(s <= prev + 1e-12);
            assert!((0.0..=1.0).contains(&s));
            prev = s;
        }

        // SPF(t) = 1 - integral of TPDF over (0, t]
        let c = curve.clone();
        for t in [0.5f64, 2.0, 8.0] {
            let pdf = |x: f64| c.tpdf(x).unwrap();
            let cum = integrate_positive_density(&pdf, (1e-14f64).ln(), t.ln(), 1e-9);
            let s = curve.spf(t).unwrap();
            assert!((s - (1.0 - cum)).abs() <= 1e-5, "t={t}: {s} vs {}", 1.0 - cum);
        }
    }

    #[test]
    fn tpdf_integrates_to_one_for_random_heads() {
        for seed in 0..5 {
            let (ps, mut head) = random_head(100 + seed, 3, 3, 4);
            head.set_time_scale(1.0 + seed as f64).unwrap();
            let z = random_z(200 + seed, 3);
            let curve = head.curve(&ps, &z).unwrap();
            let (y_lo, y_hi) = tpdf_log_bounds(&curve);
            let pdf = |t: f64| curve.tpdf(t).unwrap();
            let total = integrate_positive_density(&pdf, y_lo, y_hi, 1e-9);
            assert!((total - 1.0).abs() <= 1e-5, "seed {seed}: {total}");
        }
    }

    /// Log-time bounds that cover all but ~1e-10 of every component's mass.
    pub(crate) fn tpdf_log_bounds(curve: &SurvivalCurve) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for e in 0..curve.gates.len() {
            for k in 0..curve.alphas[e].len() {
                let center = (curve.alphas[e][k] * curve.time_scale).ln();
                let half = 27.0 / curve.betas[e][k];
                lo = lo.min(center - half);
                hi = hi.max(center + half);
            }
        }
        (lo, hi)
    }

    #[test]
    fn two_component_median_solves_mixture_cdf() {
        let curve = SurvivalCurve {
            gates: vec![1.0],
            lambdas: vec![vec![0.5, 0.5]],
            alphas: vec![vec![1.0, 4.0]],
            betas: vec![vec![2.0, 2.0]],
            time_scale: 1.0,
        };
        // by log-symmetry the mixture median is sqrt(1*4) = 2; a scan oracle
        // confirms F(2) = 0.5*(4/5) + 0.5*(1/5) = 0.5 exactly
        let m = curve.predicted_median().unwrap();
        assert!((m - 2.0).abs() <= 1e-6, "median {m}");
        let s = curve.spf(m).unwrap();
        assert!((s - 0.5).abs() <= 1e-7);
    }

    #[test]
    fn total_loss_composition() {
        let (ps, head) = random_head(20, 3, 4, 2);
        let z = random_z(21, 3);
        let mk = |lambda: f64, sign: f64| {
            let mut tape = Tape::new();
            let zn = tape.constant(1, 3, z.clone()).unwrap();
            let l = head
                .total_loss(&mut tape, &ps, zn, 2.0, 1, lambda, sign)
                .unwrap();
            tape.scalar_value(l)
        };
        let nll_only = mk(0.0, -1.0);
        let mut tape = Tape::new();
        let zn = tape.constant(1, 3, z.clone()).unwrap();
        let nll = head.nll_loss(&mut tape, &ps, zn, 2.0, 1).unwrap();
        assert_eq!(nll_only, tape.scalar_value(nll));

        let ent = {
            let mut tape = Tape::new();
            let zn = tape.constant(1, 3, z.clone()).unwrap();
            let e = head.gate_entropy(&mut tape, &ps, zn).unwrap();
            tape.scalar_value(e)
        };
        let with_ent = mk(0.1, -1.0);
        assert!((with_ent - (nll_only - 0.1 * ent)).abs() <= 1e-12);
        let plus_ent = mk(0.1, 1.0);
        assert!((plus_ent - (nll_only + 0.1 * ent)).abs() <= 1e-12);
    }

    #[test]
    fn uniform_gate_entropy_is_ln_e() {
        let (mut ps, head) = random_head(22, 3, 5, 2);
        let gid = ps.id("head.gate").unwrap();
        ps.get_mut(gid).data.iter_mut().for_each(|v| *v = 0.0);
        let z = random_z(23, 3);
        let mut tape = Tape::new();
        let zn = tape.constant(1, 3, z).unwrap();
        let e = head.gate_entropy(&mut tape, &ps, zn).unwrap();
        assert!((tape.scalar_value(e) - 5.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (ps, mut head) = random_head(30, 4, 2, 3);
        head.set_time_scale(3.0).unwrap();
        let z = random_z(31, 4);
        let head_eval = head.clone();
        let eval = move |probe: &ParamSet, zv: &[f64]| {
            let mut tape = Tape::new();
            let zn = tape.constant(1, 4, zv.to_vec()).unwrap();
            let l = head_eval
                .total_loss(&mut tape, probe, zn, 5.0, 1, 0.01, -1.0)
                .unwrap();
            tape.scalar_value(l)
        };

        // analytic grads for params and z
        let mut tape = Tape::new();
        let zt = Tensor::new(1, 4, z.clone()).unwrap().with_grad();
        let zn = tape.leaf(&zt);
        let l = head.total_loss(&mut tape, &ps, zn, 5.0, 1, 0.01, -1.0).unwrap();
        let mut ps_grad = ps.clone();
        tape.backward(l, &mut ps_grad).unwrap();
        let z_grad = tape.grad(zn).to_vec();

        for (id, name, _) in ps.iter() {
            let analytic = ps_grad.get(id).grad.clone().unwrap();
            let theta = ps.get(id).data.clone();
            let err = finite_diff_check(
                |t| {
                    let mut probe = ps.clone();
                    probe.get_mut(id).data.copy_from_slice(t);
                    eval(&probe, &z)
                },
                &theta,
                &analytic,
                1e-5,
            );
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
        let err = finite_diff_check(|zv| eval(&ps, zv), &z, &z_grad, 1e-5);
        assert!(err <= 1e-4, "z: relative error {err}");

        // censored branch too
        let zc = z.clone();
        let eval_c = {
            let head = head.clone();
            move |probe: &ParamSet| {
                let mut tape = Tape::new();
                let zn = tape.constant(1, 4, zc.clone()).unwrap();
                let l = head.total_loss(&mut tape, probe, zn, 5.0, 0, 0.01, -1.0).unwrap();
                tape.scalar_value(l)
            }
        };
        let mut tape = Tape::new();
        let zn = tape.constant(1, 4, z.clone()).unwrap();
        let l = head.total_loss(&mut tape, &ps, zn, 5.0, 0, 0.01, -1.0).unwrap();
        let mut ps_grad = ps.clone();
        tape.backward(l, &mut ps_grad).unwrap();
        let pid = ps.id("head.p_beta").unwrap();
        let analytic = ps_grad.get(pid).grad.clone().unwrap();
        let theta = ps.get(pid).data.clone();
        let err = finite_diff_check(
            |t| {
                let mut probe = ps.clone();
                probe.get_mut(pid).data.copy_from_slice(t);
                eval_c(&probe)
            },
            &theta,
            &analytic,
            1e-5,
        );
        assert!(err <= 1e-4, "censored p_beta: relative error {err}");
    }

    #[test]
    fn fit_recovers_log_logistic_median() {
        use crate::dataio::sample_log_logistic;
        use crate::tensor::AdamState;

        // 2000 uncensored samples from log-logistic(alpha=10, beta=3)
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let times: Vec<f64> = (0..2000)
            .map(|_| sample_log_logistic(&mut rng, 10.0, 3.0))
            .collect();
        let mut sorted = times.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_t = sorted[sorted.len() / 2];

        let (mut ps, mut head) = random_head(42, 2, 1, 2);
        head.set_time_scale(median_t).unwrap();
        // freeze the mixer so the component weights stay uniform
        let mixer_id = ps.id("head.expert0.mixer").unwrap();
        ps.get_mut(mixer_id).data.iter_mut().for_each(|v| *v = 0.0);
        ps.get_mut(mixer_id).requires_grad = false;
        let gate_id = ps.id("head.gate").unwrap();
        ps.get_mut(gate_id).requires_grad = false;

        let z = vec![1.0, -1.0];
        let mut adam = AdamState::new(&ps, 5e-2, 0.0);
        let mut order: Vec<usize> = (0..times.len()).collect();
        for _ in 0..3 {
            use rand::seq::SliceRandom;
            order.shuffle(&mut rng);
            for &i in &order {
                let mut tape = Tape::new();
                let zn = tape.constant(1, 2, z.clone()).unwrap();
                let loss = head.nll_loss(&mut tape, &ps, zn, times[i], 1).unwrap();
                tape.backward(loss, &mut ps).unwrap();
                adam.step(&mut ps);
                ps.zero_grads();
            }
        }
        let curve = head.curve(&ps, &z).unwrap();
        let m = curve.predicted_median().unwrap();
        assert!(
            (m - 10.0).abs() / 10.0 <= 0.10,
            "recovered median {m}, want within 10% of 10"
        );
    }
}
