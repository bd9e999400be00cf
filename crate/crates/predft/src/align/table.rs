use std::collections::HashMap;

use crate::numkit::{pca_reduce, PcaResult, Tensor};

use super::{invalid, PredictionWindow, Result};

/// Per-word metadata: global word index, owning frame, surface form.
#[derive(Debug, Clone)]
pub struct WordInfo {
    pub index: usize,
    pub frame: usize,
    pub surface: String,
}

/// Word-indexed feature table for one or more stacked recordings.
///
/// Rows of `features` correspond one-to-one to `words`. Stories stacked via
/// [`ActivationTable::stack`] keep segment boundaries so future-word windows
/// never cross a story edge.
#[derive(Debug, Clone)]
pub struct ActivationTable {
    pub words: Vec<WordInfo>,
    pub features: Tensor,
    pub n_frames: usize,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    word_start: usize,
    word_end: usize,
    frame_start: usize,
    frame_end: usize,
}

/// Any word-indexed feature source (the stand-in for language-model
/// activations).
pub trait ActivationProvider {
    fn dim(&self) -> usize;
    fn features(&self, word: &str) -> Vec<f64>;
}

/// Lookup into a fixed embedding table; unknown words map to zeros.
pub struct EmbeddingProvider {
    index: HashMap<String, usize>,
    table: Tensor,
}

impl EmbeddingProvider {
    pub fn new(table: Tensor, lexicon: &[String]) -> Result<Self> {
        let (rows, _) = table.dims2()?;
        if rows != lexicon.len() {
            return invalid(format!(
                "embedding provider: {rows} table rows for {} lexicon words",
                lexicon.len()
            ));
        }
        let index = lexicon.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Ok(EmbeddingProvider { index, table })
    }
}

impl ActivationProvider for EmbeddingProvider {
    fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    fn features(&self, word: &str) -> Vec<f64> {
        let normalized = crate::data::normalize_word(word);
        let key = normalized.as_deref().unwrap_or(word);
        match self.index.get(key) {
            Some(&row) => self.table.row(row).to_vec(),
            None => vec![0.0; self.dim()],
        }
    }
}

impl ActivationTable {
    /// Builds the table for one recording's word stream.
    pub fn from_frame_words(
        frame_words: &[Vec<String>],
        provider: &dyn ActivationProvider,
    ) -> Result<ActivationTable> {
        let n_frames = frame_words.len();
        if n_frames == 0 {
            return invalid("activation table: no frames");
        }
        let mut words = Vec::new();
        let mut rows = Vec::new();
        for (frame, frame_word_list) in frame_words.iter().enumerate() {
            for surface in frame_word_list {
                words.push(WordInfo { index: words.len(), frame, surface: surface.clone() });
                rows.push(provider.features(surface));
            }
        }
        if words.is_empty() {
            return invalid("activation table: no words");
        }
        let features = Tensor::from_rows(&rows)?;
        let word_end = words.len();
        Ok(ActivationTable {
            words,
            features,
            n_frames,
            segments: vec![Segment { word_start: 0, word_end, frame_start: 0, frame_end: n_frames }],
        })
    }

    /// Stacks tables (one per story) into a single table with segment
    /// boundaries preserved; word and frame indices are re-based globally.
    pub fn stack(tables: &[ActivationTable]) -> Result<ActivationTable> {
        if tables.is_empty() {
            return invalid("activation table: nothing to stack");
        }
        let mut words = Vec::new();
        let mut segments = Vec::new();
        let mut n_frames = 0;
        let feature_parts: Vec<&Tensor> = tables.iter().map(|t| &t.features).collect();
        for t in tables {
            let word_offset = words.len();
            let frame_offset = n_frames;
            for w in &t.words {
                words.push(WordInfo {
                    index: w.index + word_offset,
                    frame: w.frame + frame_offset,
                    surface: w.surface.clone(),
                });
            }
            for s in &t.segments {
                segments.push(Segment {
                    word_start: s.word_start + word_offset,
                    word_end: s.word_end + word_offset,
                    frame_start: s.frame_start + frame_offset,
                    frame_end: s.frame_end + frame_offset,
                });
            }
            n_frames += t.n_frames;
        }
        Ok(ActivationTable {
            words,
            features: Tensor::concat_rows(&feature_parts)?,
            n_frames,
            segments,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Per-frame anchor: the index of the frame's first word, if any.
    fn frame_anchor_words(&self) -> Vec<Option<usize>> {
        let mut anchors = vec![None; self.n_frames];
        for w in self.words.iter().rev() {
            anchors[w.frame] = Some(w.index);
        }
        anchors
    }

    fn segment_of_word(&self, word: usize) -> &Segment {
        self.segments
            .iter()
            .find(|s| word >= s.word_start && word < s.word_end)
            .expect("word outside all segments")
    }
}

/// Row t is the activation of the first word of frame t; empty frames
/// inherit the previous frame's anchor row (within their story segment).
pub fn select_frame_activations(table: &ActivationTable) -> Result<Tensor> {
    let anchors = table.frame_anchor_words();
    let mut rows = Vec::with_capacity(table.n_frames);
    for segment in &table.segments {
        let mut last: Option<usize> = None;
        for frame in segment.frame_start..segment.frame_end {
            let anchor = match anchors[frame] {
                Some(word) => {
                    last = Some(word);
                    word
                }
                None => match last {
                    Some(word) => word,
                    None => {
                        return invalid(format!(
                            "select_frame_activations: frame {frame} is empty with no anchor to inherit"
                        ))
                    }
                },
            };
            rows.push(anchor);
        }
    }
    Ok(table.features.gather_rows(&rows)?)
}

/// Row t concatenates the activations of words `anchor(t)+d .. anchor(t)+d+l-1`;
/// positions past the story segment end contribute zero vectors.
pub fn build_future_features(
    table: &ActivationTable,
    window: PredictionWindow,
    reduced_dim: usize,
) -> Result<Tensor> {
    window.validate()?;
    if table.dim() != reduced_dim {
        return invalid(format!(
            "build_future_features: table dim {} does not match reduced_dim {reduced_dim}",
            table.dim()
        ));
    }
    let anchors = table.frame_anchor_words();
    let width = reduced_dim * window.length;
    let mut data = vec![0.0; table.n_frames * width];
    let mut row = 0;
    for segment in &table.segments {
        let mut last: Option<usize> = None;
        for frame in segment.frame_start..segment.frame_end {
            let anchor = match anchors[frame] {
                Some(word) => {
                    last = Some(word);
                    Some(word)
                }
                None => last,
            };
            if let Some(anchor) = anchor {
                let seg = table.segment_of_word(anchor);
                for offset in 0..window.length {
                    let word = anchor + window.distance + offset;
                    if word < seg.word_end {
                        let dst = row * width + offset * reduced_dim;
                        data[dst..dst + reduced_dim].copy_from_slice(table.features.row(word));
                    }
                }
            }
            row += 1;
        }
    }
    Ok(Tensor::new(vec![table.n_frames, width], data)?)
}

/// PCA-reduces the per-word features to `k` dimensions (fit over all word
/// rows), returning the reduced table and the decomposition.
pub fn reduce_activations(table: &ActivationTable, k: usize) -> Result<(ActivationTable, PcaResult)> {
    let pca = pca_reduce(&table.features, k)?;
    let reduced = ActivationTable {
        words: table.words.clone(),
        features: pca.reduced.clone(),
        n_frames: table.n_frames,
        segments: table.segments.clone(),
    };
    Ok((reduced, pca))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// provider whose feature for word "wN" is a one-hot-ish row [N, N+0.5]
    struct ToyProvider;

    impl ActivationProvider for ToyProvider {
        fn dim(&self) -> usize {
            2
        }
        fn features(&self, word: &str) -> Vec<f64> {
            let n: f64 = word.trim_start_matches('w').parse().unwrap_or(-1.0);
            vec![n, n + 0.5]
        }
    }

    fn frames(spec: &[&[&str]]) -> Vec<Vec<String>> {
        spec.iter().map(|f| f.iter().map(|w| w.to_string()).collect()).collect()
    }

    #[test]
    fn frame_activations_pick_first_word() {
        let table =
            ActivationTable::from_frame_words(&frames(&[&["w0", "w1"], &["w2"]]), &ToyProvider)
                .unwrap();
        let rows = select_frame_activations(&table).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        assert_eq!(rows.row(0), &[0.0, 0.5]);
        assert_eq!(rows.row(1), &[2.0, 2.5]);
    }

    #[test]
    fn empty_frames_forward_fill() {
        let table =
            ActivationTable::from_frame_words(&frames(&[&["w0"], &[], &["w2"]]), &ToyProvider)
                .unwrap();
        let rows = select_frame_activations(&table).unwrap();
        assert_eq!(rows.row(0), &[0.0, 0.5]);
        assert_eq!(rows.row(1), &[0.0, 0.5]);
        assert_eq!(rows.row(2), &[2.0, 2.5]);
    }

    #[test]
    fn empty_first_frame_is_an_error() {
        let table =
            ActivationTable::from_frame_words(&frames(&[&[], &["w1"]]), &ToyProvider).unwrap();
        assert!(select_frame_activations(&table).is_err());
    }

    #[test]
    fn single_frame_story() {
        let table = ActivationTable::from_frame_words(&frames(&[&["w7"]]), &ToyProvider).unwrap();
        let rows = select_frame_activations(&table).unwrap();
        assert_eq!(rows.shape(), &[1, 2]);
        assert_eq!(rows.row(0), &[7.0, 7.5]);
    }

    #[test]
    fn future_features_concatenate_window() {
        // "he could still hear and feel": anchor "he", d=4, l=2 -> and, feel
        let table = ActivationTable::from_frame_words(
            &frames(&[&["w0", "w1", "w2"], &["w3", "w4", "w5"]]),
            &ToyProvider,
        )
        .unwrap();
        let features =
            build_future_features(&table, PredictionWindow::new(4, 2), 2).unwrap();
        assert_eq!(features.shape(), &[2, 4]);
        assert_eq!(features.row(0), &[4.0, 4.5, 5.0, 5.5]);
        // frame 1 anchors at w3: words 7, 8 are past the end -> zeros
        assert_eq!(features.row(1), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn future_features_at_last_word_are_zero() {
        let table = ActivationTable::from_frame_words(&frames(&[&["w0"]]), &ToyProvider).unwrap();
        for d in 1..4 {
            let f = build_future_features(&table, PredictionWindow::new(d, 2), 2).unwrap();
            assert!(f.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn future_feature_width_is_dim_times_length() {
        let table = ActivationTable::from_frame_words(
            &frames(&[&["w0", "w1", "w2", "w3"]]),
            &ToyProvider,
        )
        .unwrap();
        let f = build_future_features(&table, PredictionWindow::new(0, 3), 2).unwrap();
        assert_eq!(f.shape(), &[1, 6]);
    }

    #[test]
    fn stacked_tables_do_not_leak_across_stories() {
        let a = ActivationTable::from_frame_words(&frames(&[&["w0", "w1"]]), &ToyProvider).unwrap();
        let b = ActivationTable::from_frame_words(&frames(&[&["w8", "w9"]]), &ToyProvider).unwrap();
        let stacked = ActivationTable::stack(&[a, b]).unwrap();
        assert_eq!(stacked.n_frames, 2);
        let f = build_future_features(&stacked, PredictionWindow::new(1, 2), 2).unwrap();
        // story 0 anchor w0: +1 = w1 in range, +2 would be w8 but crosses the
        // segment edge, so it must be zero
        assert_eq!(f.row(0), &[1.0, 1.5, 0.0, 0.0]);
        assert_eq!(f.row(1), &[9.0, 9.5, 0.0, 0.0]);
    }

    #[test]
    fn reduce_activations_preserves_metadata() {
        let table = ActivationTable::from_frame_words(
            &frames(&[&["w0", "w1"], &["w2", "w3", "w4"]]),
            &ToyProvider,
        )
        .unwrap();
        let (reduced, pca) = reduce_activations(&table, 1).unwrap();
        assert_eq!(reduced.dim(), 1);
        assert_eq!(reduced.n_frames, 2);
        assert_eq!(reduced.words.len(), 5);
        assert_eq!(pca.projection.shape(), &[2, 1]);
    }
}
