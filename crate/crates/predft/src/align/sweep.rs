use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::plot::{line_chart, Series};

use super::ridge::validate_roi;
use super::table::{build_future_features, select_frame_activations};
use super::{
    invalid, prediction_score, ActivationTable, PredictionWindow, ResponseMatrix, Result,
    RidgeSpec,
};

/// A named, resolved voxel set.
#[derive(Debug, Clone)]
pub struct RoiSet {
    pub name: String,
    pub voxels: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct SurfaceCell {
    pub d: usize,
    pub l: usize,
    pub score: f64,
    pub fold_std: f64,
}

/// Prediction scores over the (d, l) grid for one ROI set; cells are stored
/// d-major, l-minor.
#[derive(Debug, Clone)]
pub struct ScoreSurface {
    pub roi_set: String,
    pub d_values: Vec<usize>,
    pub l_values: Vec<usize>,
    pub cells: Vec<SurfaceCell>,
}

impl ScoreSurface {
    pub fn cell(&self, d: usize, l: usize) -> Option<&SurfaceCell> {
        self.cells.iter().find(|c| c.d == d && c.l == l)
    }

    /// argmax over d of the score at a fixed l
    pub fn best_distance_at(&self, l: usize) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.l == l)
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
            .map(|c| c.d)
    }
}

/// Fills every (d, l) cell with a prediction score per ROI set. Cells run in
/// parallel and are gathered by index, so results are independent of
/// execution order. When `out` is given, `scores.csv` and one SVG per ROI
/// set are emitted there.
pub fn score_sweep(
    table: &ActivationTable,
    responses: &ResponseMatrix,
    d_range: &[usize],
    l_range: &[usize],
    roi_sets: &[RoiSet],
    spec: &RidgeSpec,
    out: Option<&Path>,
) -> Result<Vec<ScoreSurface>> {
    if d_range.is_empty() || l_range.is_empty() {
        return invalid("score_sweep: empty d or l range");
    }
    if roi_sets.is_empty() {
        return invalid("score_sweep: no ROI sets");
    }
    for roi in roi_sets {
        validate_roi(&roi.voxels, responses.voxels())?;
    }
    if table.n_frames != responses.frames() {
        return invalid(format!(
            "score_sweep: table covers {} frames, responses have {}",
            table.n_frames,
            responses.frames()
        ));
    }
    let base = select_frame_activations(table)?;
    let roi_responses: Vec<ResponseMatrix> = roi_sets
        .iter()
        .map(|roi| responses.restrict_voxels(&roi.voxels))
        .collect::<Result<_>>()?;

    let cells: Vec<(usize, usize)> = d_range
        .iter()
        .flat_map(|&d| l_range.iter().map(move |&l| (d, l)))
        .collect();
    let computed: Vec<Result<Vec<(f64, f64)>>> = cells
        .par_iter()
        .map(|&(d, l)| {
            let future = build_future_features(table, PredictionWindow::new(d, l), table.dim())?;
            roi_responses
                .iter()
                .map(|resp| {
                    let p = prediction_score(&base, &future, resp, spec)?;
                    Ok((p.score, p.fold_std))
                })
                .collect()
        })
        .collect();

    let mut surfaces: Vec<ScoreSurface> = roi_sets
        .iter()
        .map(|roi| ScoreSurface {
            roi_set: roi.name.clone(),
            d_values: d_range.to_vec(),
            l_values: l_range.to_vec(),
            cells: Vec::with_capacity(cells.len()),
        })
        .collect();
    for (cell_idx, &(d, l)) in cells.iter().enumerate() {
        let per_roi = match &computed[cell_idx] {
            Ok(v) => v,
            Err(e) => return invalid(format!("score_sweep cell (d={d}, l={l}): {e}")),
        };
        for (roi_idx, &(score, fold_std)) in per_roi.iter().enumerate() {
            surfaces[roi_idx].cells.push(SurfaceCell { d, l, score, fold_std });
        }
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_sweep_csv(&surfaces, &dir.join("scores.csv"))?;
        for surface in &surfaces {
            let name = if surfaces.len() == 1 {
                "surface.svg".to_string()
            } else {
                format!("surface_{}.svg", surface.roi_set)
            };
            fs::write(dir.join(name), surface_svg(surface))?;
        }
    }
    Ok(surfaces)
}

/// `d,l,roi_set,score,fold_std` rows ordered by ROI set, then d, then l.
pub fn write_sweep_csv(surfaces: &[ScoreSurface], path: &Path) -> Result<()> {
    let mut out = String::from("d,l,roi_set,score,fold_std\n");
    for surface in surfaces {
        for cell in &surface.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                cell.d, cell.l, surface.roi_set, cell.score, cell.fold_std
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// One polyline per l value, x-axis d.
pub fn surface_svg(surface: &ScoreSurface) -> String {
    let series: Vec<Series> = surface
        .l_values
        .iter()
        .map(|&l| Series {
            label: format!("l={l}"),
            points: surface
                .cells
                .iter()
                .filter(|c| c.l == l)
                .map(|c| (c.d as f64, c.score))
                .collect(),
        })
        .collect();
    line_chart(
        &format!("prediction score, ROI {}", surface.roi_set),
        "prediction distance d",
        "prediction score",
        &series,
    )
}
