use crate::numkit::BoolMask;

use super::{invalid, Result};

/// Predictive-coding attention mask: rows are decoder tokens, columns are
/// the k* retained fMRI time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PcMask {
    pub mask: BoolMask,
    pub fragments: Vec<usize>,
    pub k_star: usize,
}

/// A token in text fragment t may attend to predictive representations at
/// time steps >= t; earlier ones are masked. Fragment indices at or past the
/// last column clamp to k*-1 so every row keeps at least one attendable
/// column.
pub fn build_pc_mask(token_fragments: &[usize], k_star: usize) -> Result<PcMask> {
    if k_star == 0 {
        return invalid("pc mask: k_star must be >= 1");
    }
    if token_fragments.is_empty() {
        return invalid("pc mask: no tokens");
    }
    if token_fragments.windows(2).any(|w| w[0] > w[1]) {
        return invalid("pc mask: fragment ids must be non-decreasing");
    }
    let k_t = token_fragments.len();
    let mut data = vec![false; k_t * k_star];
    for (i, &fragment) in token_fragments.iter().enumerate() {
        let first = fragment.min(k_star - 1);
        for j in first..k_star {
            data[i * k_star + j] = true;
        }
    }
    Ok(PcMask {
        mask: BoolMask::new(vec![k_t, k_star], data).map_err(crate::numkit::NumError::from)?,
        fragments: token_fragments.to_vec(),
        k_star,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mask: &PcMask, i: usize) -> Vec<bool> {
        (0..mask.k_star).map(|j| mask.mask.at2(i, j)).collect()
    }

    #[test]
    fn matches_worked_example() {
        let m = build_pc_mask(&[0, 0, 1, 2, 2], 3).unwrap();
        assert_eq!(row(&m, 0), vec![true, true, true]);
        assert_eq!(row(&m, 1), vec![true, true, true]);
        assert_eq!(row(&m, 2), vec![false, true, true]);
        assert_eq!(row(&m, 3), vec![false, false, true]);
        assert_eq!(row(&m, 4), vec![false, false, true]);
    }

    #[test]
    fn single_column_is_all_true() {
        let m = build_pc_mask(&[0, 1, 5], 1).unwrap();
        assert!(m.mask.data().iter().all(|&b| b));
    }

    #[test]
    fn trailing_fragments_clamp_to_last_column() {
        let m = build_pc_mask(&[5], 3).unwrap();
        assert_eq!(row(&m, 0), vec![false, false, true]);
    }

    #[test]
    fn decreasing_fragments_rejected() {
        assert!(build_pc_mask(&[1, 0], 3).is_err());
    }

    #[test]
    fn brute_force_no_all_false_rows() {
        // every non-decreasing fragment vector of length <= 6 with values
        // 0..=k* for k* <= 4
        for k_star in 1..=4usize {
            let mut stack: Vec<Vec<usize>> = (0..=k_star).map(|f| vec![f]).collect();
            while let Some(fragments) = stack.pop() {
                let m = build_pc_mask(&fragments, k_star).unwrap();
                for (i, &fragment) in fragments.iter().enumerate() {
                    for j in 0..k_star {
                        let want = j >= fragment.min(k_star - 1);
                        assert_eq!(m.mask.at2(i, j), want, "rule mismatch at ({i},{j})");
                    }
                    assert!((0..k_star).any(|j| m.mask.at2(i, j)), "all-false row");
                }
                if fragments.len() < 6 {
                    let last = *fragments.last().unwrap();
                    for next in last..=k_star {
                        let mut extended = fragments.clone();
                        extended.push(next);
                        stack.push(extended);
                    }
                }
            }
        }
    }
}
