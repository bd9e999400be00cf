use serde::{Deserialize, Serialize};

use crate::numkit::{pearson_columns, solve_spd, Tensor};

use super::{invalid, Result};

/// Frames x voxels BOLD responses.
#[derive(Debug, Clone)]
pub struct ResponseMatrix {
    data: Tensor,
}

impl ResponseMatrix {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims2()?;
        Ok(ResponseMatrix { data })
    }

    /// Transposes `[voxels, frames]` surface data into response rows.
    pub fn from_surface(surface: &Tensor) -> Result<Self> {
        Ok(ResponseMatrix { data: surface.transposed()? })
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn voxels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn restrict_voxels(&self, indices: &[usize]) -> Result<ResponseMatrix> {
        Ok(ResponseMatrix { data: self.data.gather_cols(indices)? })
    }

    /// Stacks response blocks row-wise (stories in order).
    pub fn stack(parts: &[ResponseMatrix]) -> Result<ResponseMatrix> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.data).collect();
        Ok(ResponseMatrix { data: Tensor::concat_rows(&tensors)? })
    }
}

/// Cross-validated ridge configuration.
///
/// The default grid follows the verification protocol: 10 penalties
/// log-spaced over [1e-1, 1e8], 10 contiguous-block folds, per-fold
/// column centering of features and targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeSpec {
    pub penalties: Vec<f64>,
    pub folds: usize,
    pub centering: bool,
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec {
            penalties: (0..10).map(|e| 10f64.powi(e - 1)).collect(),
            folds: 10,
            centering: true,
        }
    }
}

impl RidgeSpec {
    /// Single fixed penalty, no cross-validation, no centering: fits and
    /// predicts on all rows (the closed-form normal-equations setting).
    pub fn fixed(penalty: f64) -> Self {
        RidgeSpec { penalties: vec![penalty], folds: 1, centering: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.penalties.is_empty() {
            return invalid("ridge: empty penalty grid");
        }
        if self.penalties.iter().any(|&a| a <= 0.0 || !a.is_finite()) {
            return invalid("ridge: penalties must be strictly positive");
        }
        if self.penalties.windows(2).any(|w| w[0] >= w[1]) && self.penalties.len() > 1 {
            return invalid("ridge: penalties must be sorted ascending");
        }
        if self.folds == 0 {
            return invalid("ridge: folds must be >= 1");
        }
        Ok(())
    }
}

/// Contiguous fold blocks with the remainder distributed to leading folds.
pub(crate) fn fold_bounds(n: usize, folds: usize) -> Vec<(usize, usize)> {
    let base = n / folds;
    let remainder = n % folds;
    let mut bounds = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let size = base + usize::from(f < remainder);
        bounds.push((start, start + size));
        start += size;
    }
    bounds
}

/// Cross-validated brain score: per-voxel Pearson between concatenated
/// held-out ridge predictions and responses, plus the voxel mean.
#[derive(Debug, Clone)]
pub struct BrainScore {
    /// voxel mean of `voxel_r`
    pub mean_r: f64,
    pub voxel_r: Vec<f64>,
    /// per-fold voxel-mean correlation within each held-out block
    pub fold_r: Vec<f64>,
    /// penalty chosen per fold
    pub fold_penalties: Vec<f64>,
    /// concatenated held-out predictions, row order = response row order
    pub predictions: Tensor,
}

struct RidgeFit {
    weights: Tensor,
    x_mean: Vec<f64>,
    y_mean: Vec<f64>,
}

fn column_means(m: &Tensor, rows: &[usize]) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut means = vec![0.0; cols];
    for &r in rows {
        for (mean, &v) in means.iter_mut().zip(m.row(r)) {
            *mean += v;
        }
    }
    for mean in means.iter_mut() {
        *mean /= rows.len() as f64;
    }
    means
}

fn ridge_fit(
    x: &Tensor,
    y: &Tensor,
    rows: &[usize],
    alpha: f64,
    centering: bool,
) -> Result<RidgeFit> {
    let p = x.shape()[1];
    let v = y.shape()[1];
    let x_mean = if centering { column_means(x, rows) } else { vec![0.0; p] };
    let y_mean = if centering { column_means(y, rows) } else { vec![0.0; v] };

    // gram = Xc^T Xc + alpha I, rhs = Xc^T Yc
    let mut gram = vec![0.0; p * p];
    let mut rhs = vec![0.0; p * v];
    for &r in rows {
        let xr = x.row(r);
        let yr = y.row(r);
        for i in 0..p {
            let xi = xr[i] - x_mean[i];
            if xi == 0.0 {
                continue;
            }
            for j in i..p {
                gram[i * p + j] += xi * (xr[j] - x_mean[j]);
            }
            let rhs_row = &mut rhs[i * v..(i + 1) * v];
            for j in 0..v {
                rhs_row[j] += xi * (yr[j] - y_mean[j]);
            }
        }
    }
    for i in 0..p {
        for j in (i + 1)..p {
            gram[j * p + i] = gram[i * p + j];
        }
        gram[i * p + i] += alpha;
    }
    let weights = solve_spd(&Tensor::new(vec![p, p], gram)?, &Tensor::new(vec![p, v], rhs)?)?;
    Ok(RidgeFit { weights, x_mean, y_mean })
}

/// `intercept` adds the training target mean back (proper point predictions
/// for MSE); correlation scoring omits it so concatenated held-out
/// predictions stay unbiased on null data, where the per-fold intercept
/// anti-correlates with the held-out block mean.
fn ridge_predict(fit: &RidgeFit, x: &Tensor, rows: &[usize], intercept: bool) -> Vec<f64> {
    let p = x.shape()[1];
    let v = fit.weights.shape()[1];
    let mut out = vec![0.0; rows.len() * v];
    for (dst, &r) in rows.iter().enumerate() {
        let xr = x.row(r);
        let out_row = &mut out[dst * v..(dst + 1) * v];
        if intercept {
            out_row.copy_from_slice(&fit.y_mean);
        }
        for i in 0..p {
            let xi = xr[i] - fit.x_mean[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..v {
                out_row[j] += xi * fit.weights.at2(i, j);
            }
        }
    }
    out
}

const INNER_FOLDS: usize = 5;

/// Picks one shared penalty for all voxels: the argmin of validation SSE
/// summed over an inner contiguous 5-fold split of the training rows, with
/// each voxel's SSE normalized by its training variance so the choice is
/// invariant to per-column affine rescaling of the responses. Ties take the
/// smaller penalty. Selection sees training rows only.
fn select_penalty(x: &Tensor, y: &Tensor, train: &[usize], spec: &RidgeSpec) -> Result<usize> {
    if spec.penalties.len() == 1 || train.len() < 2 {
        return Ok(0);
    }
    let v = y.shape()[1];
    let y_mean = column_means(y, train);
    let mut y_weight = vec![0.0; v];
    for &r in train {
        for (w, (&val, &mean)) in y_weight.iter_mut().zip(y.row(r).iter().zip(&y_mean)) {
            *w += (val - mean).powi(2);
        }
    }
    for w in y_weight.iter_mut() {
        *w = if *w > 1e-300 { 1.0 / *w } else { 0.0 };
    }

    let inner = INNER_FOLDS.min(train.len());
    let mut sse = vec![0.0; spec.penalties.len()];
    for (start, end) in fold_bounds(train.len(), inner) {
        if start == end {
            continue;
        }
        let val_rows: Vec<usize> = train[start..end].to_vec();
        let fit_rows: Vec<usize> =
            train[..start].iter().chain(&train[end..]).copied().collect();
        if fit_rows.is_empty() {
            continue;
        }
        for (ai, &alpha) in spec.penalties.iter().enumerate() {
            let fit = ridge_fit(x, y, &fit_rows, alpha, spec.centering)?;
            let pred = ridge_predict(&fit, x, &val_rows, true);
            for (dst, &r) in val_rows.iter().enumerate() {
                let yr = y.row(r);
                for j in 0..v {
                    let e = pred[dst * v + j] - yr[j];
                    sse[ai] += y_weight[j] * e * e;
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..sse.len() {
        if sse[i] < sse[best] {
            best = i;
        }
    }
    Ok(best)
}

fn validate_inputs(features: &Tensor, responses: &ResponseMatrix, spec: &RidgeSpec) -> Result<()> {
    spec.validate()?;
    let (n, p) = features.dims2()?;
    if n != responses.frames() {
        return invalid(format!(
            "brain_score: {n} feature rows vs {} response rows",
            responses.frames()
        ));
    }
    if n < spec.folds {
        return invalid(format!("brain_score: {n} rows is fewer than {} folds", spec.folds));
    }
    if n < 2 {
        return invalid("brain_score: need at least 2 rows");
    }
    let all_constant = (0..p).all(|j| {
        let first = features.at2(0, j);
        (1..n).all(|i| features.at2(i, j) == first)
    });
    if all_constant {
        return invalid("brain_score: zero-variance feature matrix");
    }
    Ok(())
}

/// Contiguous-block cross-validated ridge regression score. With
/// `spec.folds == 1` the model is fit and evaluated on all rows (the fixed
/// penalty / no-CV setting).
pub fn brain_score(
    features: &Tensor,
    responses: &ResponseMatrix,
    spec: &RidgeSpec,
) -> Result<BrainScore> {
    validate_inputs(features, responses, spec)?;
    let n = features.shape()[0];
    let v = responses.voxels();
    let y = responses.data();

    let mut predictions = vec![0.0; n * v];
    let mut fold_r = Vec::new();
    let mut fold_penalties = Vec::new();

    let blocks: Vec<(usize, usize)> = if spec.folds == 1 {
        vec![(0, n)]
    } else {
        fold_bounds(n, spec.folds)
    };
    for &(start, end) in &blocks {
        let test_rows: Vec<usize> = (start..end).collect();
        let train_rows: Vec<usize> = if spec.folds == 1 {
            (0..n).collect()
        } else {
            (0..start).chain(end..n).collect()
        };
        let choice = select_penalty(features, y, &train_rows, spec)?;
        let alpha = spec.penalties[choice];
        fold_penalties.push(alpha);
        let fit = ridge_fit(features, y, &train_rows, alpha, spec.centering)?;
        let pred = ridge_predict(&fit, features, &test_rows, false);
        predictions[start * v..end * v].copy_from_slice(&pred);

        fold_r.push(if test_rows.len() >= 2 {
            let pred_t = Tensor::new(vec![test_rows.len(), v], pred)?;
            let truth = y.gather_rows(&test_rows)?;
            let r = pearson_columns(&pred_t, &truth)?;
            r.iter().sum::<f64>() / v as f64
        } else {
            0.0
        });
    }

    let predictions = Tensor::new(vec![n, v], predictions)?;
    let voxel_r = pearson_columns(&predictions, y)?;
    let mean_r = voxel_r.iter().sum::<f64>() / v as f64;
    Ok(BrainScore { mean_r, voxel_r, fold_r, fold_penalties, predictions })
}

/// Prediction score and its per-fold decomposition.
#[derive(Debug, Clone)]
pub struct PredictionScore {
    /// `brain_score(base ++ future) - brain_score(base)`
    pub score: f64,
    pub fold_scores: Vec<f64>,
    /// sample standard deviation of `fold_scores`
    pub fold_std: f64,
    pub base: BrainScore,
    pub augmented: BrainScore,
}

/// Brain-score gain from appending future-word columns, with identical fold
/// boundaries and penalty grids on both evaluations.
pub fn prediction_score(
    base: &Tensor,
    future: &Tensor,
    responses: &ResponseMatrix,
    spec: &RidgeSpec,
) -> Result<PredictionScore> {
    let (n, _) = base.dims2()?;
    let (nf, _) = future.dims2()?;
    if n != nf {
        return invalid(format!("prediction_score: base has {n} rows, future has {nf}"));
    }
    let base_score = brain_score(base, responses, spec)?;
    let augmented_features = Tensor::concat_cols(&[base, future])?;
    let augmented = brain_score(&augmented_features, responses, spec)?;
    let fold_scores: Vec<f64> = augmented
        .fold_r
        .iter()
        .zip(&base_score.fold_r)
        .map(|(a, b)| a - b)
        .collect();
    let fold_std = if fold_scores.len() > 1 {
        let mean = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        (fold_scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
            / (fold_scores.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    Ok(PredictionScore {
        score: augmented.mean_r - base_score.mean_r,
        fold_scores,
        fold_std,
        base: base_score,
        augmented,
    })
}

/// Brain score restricted to the ROI's voxel columns.
pub fn roi_score(
    features: &Tensor,
    responses: &ResponseMatrix,
    roi_indices: &[usize],
    spec: &RidgeSpec,
) -> Result<BrainScore> {
    validate_roi(roi_indices, responses.voxels())?;
    brain_score(features, &responses.restrict_voxels(roi_indices)?, spec)
}

pub(crate) fn validate_roi(indices: &[usize], voxels: usize) -> Result<()> {
    if indices.is_empty() {
        return invalid("roi: empty voxel list");
    }
    let mut seen = std::collections::BTreeSet::new();
    for &i in indices {
        if i >= voxels {
            return invalid(format!("roi: voxel {i} out of range {voxels}"));
        }
        if !seen.insert(i) {
            return invalid(format!("roi: duplicate voxel {i}"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn fold_bounds_distribute_remainder_to_leading_folds() {
        let bounds = fold_bounds(47, 10);
        let sizes: Vec<usize> = bounds.iter().map(|(s, e)| e - s).collect();
        assert_eq!(sizes, vec![5, 5, 5, 5, 5, 5, 5, 4, 4, 4]);
        assert_eq!(bounds[0], (0, 5));
        assert_eq!(bounds[9], (43, 47));
    }

    #[test]
    fn noiseless_linear_map_scores_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randt(&mut rng, vec![60, 5]);
        let w = randt(&mut rng, vec![5, 7]);
        let mut t = crate::numkit::Tape::new();
        let (nx, nw) = (t.leaf(x.clone()), t.leaf(w));
        let product = t.matmul(nx, nw).unwrap();
        let y = t.value(product).clone();
        let responses = ResponseMatrix::new(y).unwrap();
        let score = brain_score(&x, &responses, &RidgeSpec::default()).unwrap();
        assert!(score.mean_r > 0.999, "mean r {}", score.mean_r);
    }

    #[test]
    fn pure_noise_scores_near_zero_on_average() {
        let n = 40;
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = randt(&mut rng, vec![n, 6]);
            let y = randt(&mut rng, vec![n, 8]);
            let responses = ResponseMatrix::new(y).unwrap();
            let score = brain_score(&x, &responses, &RidgeSpec::default()).unwrap();
            total += score.mean_r.abs();
        }
        let average = total / 20.0;
        assert!(average < 2.0 / (n as f64).sqrt(), "average |mean r| = {average}");
    }

    #[test]
    fn fixed_penalty_matches_normal_equations_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let alpha = 2.5;
        let x = randt(&mut rng, vec![30, 4]);
        let y = randt(&mut rng, vec![30, 3]);
        let responses = ResponseMatrix::new(y.clone()).unwrap();
        let score = brain_score(&x, &responses, &RidgeSpec::fixed(alpha)).unwrap();
        // dense closed-form oracle: w = (X^T X + aI)^-1 X^T Y via inversion-free
        // elimination on the 4x4 system
        let p = 4;
        let mut gram = vec![0.0; p * p];
        let mut rhs = vec![0.0; p * 3];
        for r in 0..30 {
            for i in 0..p {
                for j in 0..p {
                    gram[i * p + j] += x.at2(r, i) * x.at2(r, j);
                }
                for j in 0..3 {
                    rhs[i * 3 + j] += x.at2(r, i) * y.at2(r, j);
                }
            }
        }
        for i in 0..p {
            gram[i * p + i] += alpha;
        }
        // gaussian elimination
        let mut aug = vec![0.0; p * (p + 3)];
        for i in 0..p {
            for j in 0..p {
                aug[i * (p + 3) + j] = gram[i * p + j];
            }
            for j in 0..3 {
                aug[i * (p + 3) + p + j] = rhs[i * 3 + j];
            }
        }
        let w = p + 3;
        for col in 0..p {
            let piv = (col..p).max_by(|&a, &b| {
                aug[a * w + col].abs().partial_cmp(&aug[b * w + col].abs()).unwrap()
            }).unwrap();
            for j in 0..w {
                aug.swap(col * w + j, piv * w + j);
            }
            let d = aug[col * w + col];
            for r in 0..p {
                if r == col {
                    continue;
                }
                let f = aug[r * w + col] / d;
                for j in col..w {
                    aug[r * w + j] -= f * aug[col * w + j];
                }
            }
        }
        let mut weights = vec![0.0; p * 3];
        for i in 0..p {
            for j in 0..3 {
                weights[i * 3 + j] = aug[i * w + p + j] / aug[i * w + i];
            }
        }
        for r in 0..30 {
            for j in 0..3 {
                let mut want = 0.0;
                for i in 0..p {
                    want += x.at2(r, i) * weights[i * 3 + j];
                }
                assert!(
                    (score.predictions.at2(r, j) - want).abs() < 1e-8,
                    "row {r} voxel {j}"
                );
            }
        }
    }

    #[test]
    fn zero_and_constant_future_columns_give_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randt(&mut rng, vec![50, 4]);
        let y = randt(&mut rng, vec![50, 6]);
        let responses = ResponseMatrix::new(y).unwrap();
        let spec = RidgeSpec::default();
        let zeros = Tensor::zeros(vec![50, 3]);
        let p = prediction_score(&x, &zeros, &responses, &spec).unwrap();
        assert_eq!(p.score, 0.0, "all-zero future columns must give P = 0 exactly");
        let constant = Tensor::full(vec![50, 2], 3.75).unwrap();
        let p = prediction_score(&x, &constant, &responses, &spec).unwrap();
        assert_eq!(p.score, 0.0, "constant future columns must give P = 0 exactly");
        assert!(p.fold_scores.iter().all(|&f| f == 0.0));
    }

    #[test]
    fn roi_score_whole_equals_full_and_single_voxel_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randt(&mut rng, vec![40, 3]);
        let y = randt(&mut rng, vec![40, 5]);
        let responses = ResponseMatrix::new(y).unwrap();
        let spec = RidgeSpec::default();
        let full = brain_score(&x, &responses, &spec).unwrap();
        let all: Vec<usize> = (0..5).collect();
        let whole = roi_score(&x, &responses, &all, &spec).unwrap();
        assert_eq!(full.mean_r, whole.mean_r);
        // a single-voxel ROI's scalar is exactly that voxel's r
        let single = roi_score(&x, &responses, &[2], &spec).unwrap();
        assert_eq!(single.voxel_r.len(), 1);
        assert_eq!(single.mean_r, single.voxel_r[0]);
        // and with a fixed penalty (no selection) it matches the full run's column
        let fixed = RidgeSpec { penalties: vec![10.0], folds: 10, centering: true };
        let full_fixed = brain_score(&x, &responses, &fixed).unwrap();
        let single_fixed = roi_score(&x, &responses, &[2], &fixed).unwrap();
        assert!((single_fixed.mean_r - full_fixed.voxel_r[2]).abs() < 1e-12);
    }

    #[test]
    fn roi_rejects_bad_indices() {
        assert!(validate_roi(&[], 5).is_err());
        assert!(validate_roi(&[5], 5).is_err());
        assert!(validate_roi(&[1, 1], 5).is_err());
    }

    #[test]
    fn brain_score_affine_rescaled_responses_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randt(&mut rng, vec![40, 4]);
        let y = randt(&mut rng, vec![40, 3]);
        let spec = RidgeSpec::default();
        let base = brain_score(&x, &ResponseMatrix::new(y.clone()).unwrap(), &spec).unwrap();
        // rescale each response column by a positive affine map
        let mut rescaled = y.data().to_vec();
        let scales = [2.5, 0.3, 10.0];
        let shifts = [1.0, -4.0, 0.25];
        for r in 0..40 {
            for j in 0..3 {
                rescaled[r * 3 + j] = scales[j] * rescaled[r * 3 + j] + shifts[j];
            }
        }
        let rescaled = Tensor::new(vec![40, 3], rescaled).unwrap();
        let scaled = brain_score(&x, &ResponseMatrix::new(rescaled).unwrap(), &spec).unwrap();
        for (a, b) in base.voxel_r.iter().zip(&scaled.voxel_r) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn too_few_rows_or_constant_features_error() {
        let x = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let responses = ResponseMatrix::new(y).unwrap();
        assert!(brain_score(&x, &responses, &RidgeSpec::default()).is_err()); // 2 rows < 10 folds
        let constant = Tensor::full(vec![12, 2], 1.0).unwrap();
        let y12 = Tensor::new(vec![12, 1], (0..12).map(|v| v as f64).collect()).unwrap();
        let spec = RidgeSpec { folds: 3, ..RidgeSpec::default() };
        assert!(brain_score(&constant, &ResponseMatrix::new(y12).unwrap(), &spec).is_err());
    }
}
