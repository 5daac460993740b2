//! Cosine-similarity contrastive losses: the intra-domain original↔augmented
//! term, the inter-domain pair terms, and the λ-weighted total with
//! per-term ablation switches. Forward values and analytic gradients are
//! computed in f64; gradients are with respect to the raw (unnormalized)
//! embeddings.
//!
//! The denominator follows the printed form: the positive pair and the
//! self-similarity are excluded, summing exp(sim/τ) over j ≠ i for both the
//! anchor-side and partner-side batches. `simclr_denominator` optionally
//! adds the positive term back for comparison runs.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature, intra/inter weight, and term switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Loss_1: intra-domain original↔augmented.
    pub intra: bool,
    /// Loss_2: inter-domain between originals.
    pub inter_orig: bool,
    /// Loss_3: inter-domain between augmented views.
    pub inter_aug: bool,
    /// Loss_4: inter-domain between originals and augmented views.
    pub inter_cross: bool,
    pub simclr_denominator: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda: 0.8,
            intra: true,
            inter_orig: true,
            inter_aug: true,
            inter_cross: false,
            simclr_denominator: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::InvalidParam(format!("tau {} must be > 0", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParam(format!("lambda {} outside [0,1]", self.lambda)));
        }
        Ok(())
    }
}

fn normalize_rows(a: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut norms = Vec::with_capacity(a.nrows());
    let mut u = a.clone();
    for mut row in u.rows_mut() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::InvalidParam("zero-norm embedding row".into()));
        }
        row.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok((u, norms))
}

/// Pairwise cosine similarities: entry (i, j) = cos(aᵢ, cⱼ).
pub fn cos_sim_matrix(a: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != c.ncols() {
        return Err(Error::ShapeMismatch(format!("{} vs {} columns", a.ncols(), c.ncols())));
    }
    let (ua, _) = normalize_rows(a)?;
    let (uc, _) = normalize_rows(c)?;
    Ok(ua.dot(&uc.t()))
}

/// One loss term over an (anchor, partner) batch pair, plus gradients with
/// respect to both raw batches. The intra-domain loss is this with
/// (original, augmented); the inter-domain loss is this with the two
/// domains' originals (or augmented views).
pub fn pair_loss_grad(
    anchor: &Array2<f64>,
    partner: &Array2<f64>,
    tau: f64,
    simclr_denominator: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let b = anchor.nrows();
    if b < 2 {
        return Err(Error::InvalidParam(format!("batch size {b} leaves the denominator empty")));
    }
    if anchor.dim() != partner.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", anchor.dim(), partner.dim())));
    }
    let (u, anorms) = normalize_rows(anchor)?;
    let (v, pnorms) = normalize_rows(partner)?;
    let s_ab = u.dot(&v.t());
    let s_aa = u.dot(&u.t());

    let e_ab = s_ab.mapv(|s| (s / tau).exp());
    let e_aa = s_aa.mapv(|s| (s / tau).exp());

    let mut loss = 0.0;
    let mut g_ab = Array2::<f64>::zeros((b, b));
    let mut g_aa = Array2::<f64>::zeros((b, b));
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let mut den = 0.0;
        for j in 0..b {
            if j != i {
                den += e_aa[[i, j]] + e_ab[[i, j]];
            }
        }
        if simclr_denominator {
            den += e_ab[[i, i]];
        }
        loss += -s_ab[[i, i]] / tau + den.ln();
        for j in 0..b {
            if j != i {
                g_ab[[i, j]] = e_ab[[i, j]] / (tau * den) * inv_b;
                g_aa[[i, j]] = e_aa[[i, j]] / (tau * den) * inv_b;
            }
        }
        g_ab[[i, i]] = -inv_b / tau;
        if simclr_denominator {
            g_ab[[i, i]] += e_ab[[i, i]] / (tau * den) * inv_b;
        }
    }
    loss *= inv_b;

    // back through the similarity products
    let du = (&g_aa + &g_aa.t()).dot(&u) + g_ab.dot(&v);
    let dv = g_ab.t().dot(&u);

    // back through row normalization: da = (du − (du·u)u)/‖a‖
    let unnormalize = |d: &Array2<f64>, unit: &Array2<f64>, norms: &[f64]| {
        let mut out = Array2::<f64>::zeros(d.raw_dim());
        for i in 0..d.nrows() {
            let di = d.index_axis(Axis(0), i);
            let ui = unit.index_axis(Axis(0), i);
            let proj: f64 = di.iter().zip(ui.iter()).map(|(a, b)| a * b).sum();
            for (o, (dv, uv)) in out
                .index_axis_mut(Axis(0), i)
                .iter_mut()
                .zip(di.iter().zip(ui.iter()))
            {
                *o = (dv - proj * uv) / norms[i];
            }
        }
        out
    };
    let ganchor = unnormalize(&du, &u, &anorms);
    let gpartner = unnormalize(&dv, &v, &pnorms);
    Ok((loss, ganchor, gpartner))
}

/// Intra-domain loss value (original vs augmented batch of one domain).
pub fn intra_loss(z: &Array2<f64>, z_aug: &Array2<f64>, tau: f64) -> Result<f64> {
    pair_loss_grad(z, z_aug, tau, false).map(|(l, _, _)| l)
}

/// Inter-domain loss value, anchored on the first domain.
pub fn inter_loss(za: &Array2<f64>, zb: &Array2<f64>, tau: f64) -> Result<f64> {
    pair_loss_grad(za, zb, tau, false).map(|(l, _, _)| l)
}

/// Total-loss output: value, unweighted per-term breakdown, and gradients
/// per original/augmented batch.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: f64,
    pub breakdown: Vec<(String, f64)>,
    pub grad_orig: Vec<Array2<f64>>,
    pub grad_aug: Vec<Array2<f64>>,
}

/// λ-weighted total over the active domains: λ·Σ intra + (1−λ)·Σ inter,
/// with the configured term subsets. `names` labels the domain slots for
/// the breakdown (e.g. `["T", "F", "C"]`).
pub fn total_loss(
    orig: &[Array2<f64>],
    aug: &[Array2<f64>],
    names: &[&str],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    cfg.validate()?;
    if orig.len() != aug.len() || orig.len() != names.len() || orig.is_empty() {
        return Err(Error::ShapeMismatch("orig/aug/name slot counts disagree".into()));
    }
    let nd = orig.len();
    let mut grad_orig: Vec<Array2<f64>> = orig.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut grad_aug: Vec<Array2<f64>> = aug.iter().map(|z| Array2::zeros(z.raw_dim())).collect();
    let mut breakdown = Vec::new();
    let mut total = 0.0;

    let mut term = |label: String,
                    weight: f64,
                    a: &Array2<f64>,
                    p: &Array2<f64>|
     -> Result<(f64, Array2<f64>, Array2<f64>)> {
        let (l, ga, gp) = pair_loss_grad(a, p, cfg.tau, cfg.simclr_denominator)?;
        breakdown.push((label, l));
        total += weight * l;
        Ok((weight, ga, gp))
    };

    if cfg.intra {
        for d in 0..nd {
            let (w, ga, gp) = term(format!("intra_{}", names[d]), cfg.lambda, &orig[d], &aug[d])?;
            grad_orig[d].scaled_add(w, &ga);
            grad_aug[d].scaled_add(w, &gp);
        }
    }
    let w_inter = 1.0 - cfg.lambda;
    if cfg.inter_orig {
        for i in 0..nd {
            for j in (i + 1)..nd {
                let (w, ga, gp) = term(format!("inter_{}{}", names[i], names[j]), w_inter, &orig[i], &orig[j])?;
                grad_orig[i].scaled_add(w, &ga);
                grad_orig[j].scaled_add(w, &gp);
            }
        }
    }
    if cfg.inter_aug {
        for i in 0..nd {
            for j in (i + 1)..nd {
                let (w, ga, gp) =
                    term(format!("inter_{}a{}a", names[i], names[j]), w_inter, &aug[i], &aug[j])?;
                grad_aug[i].scaled_add(w, &ga);
                grad_aug[j].scaled_add(w, &gp);
            }
        }
    }
    if cfg.inter_cross {
        for i in 0..nd {
            for j in (i + 1)..nd {
                let (w, ga, gp) =
                    term(format!("cross_{}{}a", names[i], names[j]), w_inter, &orig[i], &aug[j])?;
                grad_orig[i].scaled_add(w, &ga);
                grad_aug[j].scaled_add(w, &gp);
                let (w, ga, gp) =
                    term(format!("cross_{}a{}", names[i], names[j]), w_inter, &aug[i], &orig[j])?;
                grad_aug[i].scaled_add(w, &ga);
                grad_orig[j].scaled_add(w, &gp);
            }
        }
    }
    Ok(TotalLoss { total, breakdown, grad_orig, grad_aug })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn randb(b: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((b, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn cos_sim_basics() {
        let a = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let s = cos_sim_matrix(&a, &a).unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-12);
        assert!((s[[1, 1]] - 1.0).abs() < 1e-12);
        assert!(s[[0, 1]].abs() < 1e-12);
        let c = arr2(&[[2.0, 1.0], [-1.0, 3.0]]);
        let ac = cos_sim_matrix(&a, &c).unwrap();
        let ca = cos_sim_matrix(&c, &a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((ac[[i, j]] - ca[[j, i]]).abs() < 1e-7);
            }
        }
        let z = arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(cos_sim_matrix(&z, &a).is_err());
    }

    #[test]
    fn identical_embeddings_force_log2() {
        let z = arr2(&[[0.3, 0.4], [0.3, 0.4]]);
        let l = intra_loss(&z, &z, 0.05).unwrap();
        assert!((l - LN2).abs() < 1e-9, "{l}");
        let l = inter_loss(&z, &z, 0.05).unwrap();
        assert!((l - LN2).abs() < 1e-9);
    }

    #[test]
    fn aligned_positives_orthogonal_negatives_closed_form() {
        let z = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let l = intra_loss(&z, &z, 0.05).unwrap();
        let want = -20.0 + LN2;
        assert!((l - want).abs() < 1e-9, "{l} vs {want}");
    }

    #[test]
    fn inter_reduces_to_intra_when_domains_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = randb(4, 8, &mut rng);
        let a = intra_loss(&z, &z, 0.05).unwrap();
        let b = inter_loss(&z, &z, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let z = arr2(&[[1.0, 0.0]]);
        assert!(intra_loss(&z, &z, 0.05).is_err());
    }

    #[test]
    fn total_all_equal_is_3_6_log2() {
        let z = arr2(&[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]);
        let orig = vec![z.clone(), z.clone(), z.clone()];
        let aug = orig.clone();
        let cfg = LossConfig::default();
        let out = total_loss(&orig, &aug, &["T", "F", "C"], &cfg).unwrap();
        assert!((out.total - 3.6 * LN2).abs() < 1e-6, "{}", out.total);
        assert_eq!(out.breakdown.len(), 9);
    }

    #[test]
    fn lambda_one_collapses_to_intra() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let orig: Vec<_> = (0..3).map(|_| randb(4, 6, &mut rng)).collect();
        let aug: Vec<_> = (0..3).map(|_| randb(4, 6, &mut rng)).collect();
        let cfg = LossConfig { lambda: 1.0, ..LossConfig::default() };
        let out = total_loss(&orig, &aug, &["T", "F", "C"], &cfg).unwrap();
        let intra_sum: f64 = (0..3).map(|d| intra_loss(&orig[d], &aug[d], cfg.tau).unwrap()).sum();
        assert_eq!(out.total, intra_sum);
    }

    #[test]
    fn intra_only_config_keeps_three_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let orig: Vec<_> = (0..3).map(|_| randb(3, 4, &mut rng)).collect();
        let aug: Vec<_> = (0..3).map(|_| randb(3, 4, &mut rng)).collect();
        let cfg = LossConfig { inter_orig: false, inter_aug: false, ..LossConfig::default() };
        let out = total_loss(&orig, &aug, &["T", "F", "C"], &cfg).unwrap();
        assert_eq!(out.breakdown.len(), 3);
        assert!(out.breakdown.iter().all(|(k, _)| k.starts_with("intra")));
        let manual: f64 = out.breakdown.iter().map(|(_, v)| v * cfg.lambda).sum();
        assert!((out.total - manual).abs() < 1e-12);
    }

    /// Central finite differences over every input entry.
    fn check_grads(cfg: &LossConfig, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let orig: Vec<_> = (0..3).map(|_| randb(4, 8, &mut rng)).collect();
        let aug: Vec<_> = (0..3).map(|_| randb(4, 8, &mut rng)).collect();
        let names = ["T", "F", "C"];
        let out = total_loss(&orig, &aug, &names, cfg).unwrap();
        let h = 1e-6;
        let eval = |o: &[Array2<f64>], a: &[Array2<f64>]| total_loss(o, a, &names, cfg).unwrap().total;
        for slot in 0..3 {
            for (r, c) in [(0usize, 0usize), (1, 3), (3, 7), (2, 5)] {
                // original side
                let mut op = orig.clone();
                op[slot][[r, c]] += h;
                let mut om = orig.clone();
                om[slot][[r, c]] -= h;
                let fd = (eval(&op, &aug) - eval(&om, &aug)) / (2.0 * h);
                let an = out.grad_orig[slot][[r, c]];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-4, "orig[{slot}][{r},{c}]: fd {fd} vs {an}");
                // augmented side
                let mut ap = aug.clone();
                ap[slot][[r, c]] += h;
                let mut am = aug.clone();
                am[slot][[r, c]] -= h;
                let fd = (eval(&orig, &ap) - eval(&orig, &am)) / (2.0 * h);
                let an = out.grad_aug[slot][[r, c]];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!((fd - an).abs() / denom < 1e-4, "aug[{slot}][{r},{c}]: fd {fd} vs {an}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_all_term_subsets() {
        let rows: [(bool, bool, bool, bool); 5] = [
            (true, false, false, false),
            (true, true, false, false),
            (true, false, true, false),
            (true, true, true, false),
            (true, true, true, true),
        ];
        for (i, (intra, inter_orig, inter_aug, inter_cross)) in rows.into_iter().enumerate() {
            let cfg = LossConfig { intra, inter_orig, inter_aug, inter_cross, ..LossConfig::default() };
            check_grads(&cfg, 100 + i as u64);
        }
        // the comparison denominator variant as well
        let cfg = LossConfig { simclr_denominator: true, ..LossConfig::default() };
        check_grads(&cfg, 999);
    }

    #[test]
    fn loss_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let orig: Vec<_> = (0..3).map(|_| randb(4, 8, &mut rng)).collect();
        let aug: Vec<_> = (0..3).map(|_| randb(4, 8, &mut rng)).collect();
        let cfg = LossConfig::default();
        let l0 = total_loss(&orig, &aug, &["T", "F", "C"], &cfg).unwrap().total;
        let mut scaled = orig.clone();
        scaled[1].mapv_inplace(|v| v * 37.5);
        let l1 = total_loss(&scaled, &aug, &["T", "F", "C"], &cfg).unwrap().total;
        assert!((l0 - l1).abs() < 1e-6);
    }

    #[test]
    fn loss_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let orig: Vec<_> = (0..3).map(|_| randb(5, 8, &mut rng)).collect();
        let aug: Vec<_> = (0..3).map(|_| randb(5, 8, &mut rng)).collect();
        let cfg = LossConfig::default();
        let l0 = total_loss(&orig, &aug, &["T", "F", "C"], &cfg).unwrap().total;
        let perm = [3usize, 0, 4, 1, 2];
        let permute = |z: &Array2<f64>| {
            let mut out = z.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.row_mut(dst).assign(&z.row(src));
            }
            out
        };
        let orig_p: Vec<_> = orig.iter().map(permute).collect();
        let aug_p: Vec<_> = aug.iter().map(permute).collect();
        let l1 = total_loss(&orig_p, &aug_p, &["T", "F", "C"], &cfg).unwrap().total;
        assert!((l0 - l1).abs() < 1e-6);
    }
}
