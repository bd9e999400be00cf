use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{invalid, Recording, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    WithinSubject,
    CrossSubject,
}

/// Explicit assignment of (subject, story) pairs to the three sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// Recording indices per set.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// One leakage-rule violation found while auditing a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitViolation {
    /// a validation/test subject also appears in training
    SubjectOverlap { subject: String, split: &'static str },
    /// a validation/test story also appears in training
    StoryOverlap { story: String, split: &'static str },
    /// within-subject mode with more than one subject
    MultipleSubjects { subjects: Vec<String> },
}

impl std::fmt::Display for SplitViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitViolation::SubjectOverlap { subject, split } => {
                write!(f, "subject-overlap: {subject} appears in both train and {split}")
            }
            SplitViolation::StoryOverlap { story, split } => {
                write!(f, "story-overlap: {story} appears in both train and {split}")
            }
            SplitViolation::MultipleSubjects { subjects } => {
                write!(f, "multiple-subjects: within-subject split uses {subjects:?}")
            }
        }
    }
}

/// Applies the assignment and audits the leakage rules. The audit report is
/// returned (empty on a clean split) rather than thrown, so callers decide
/// how strictly to enforce it.
pub fn make_splits(
    recordings: &[Recording],
    spec: &SplitSpec,
) -> Result<(Splits, Vec<SplitViolation>)> {
    let find = |pairs: &[(String, String)]| -> Result<Vec<usize>> {
        pairs
            .iter()
            .map(|(subject, story)| {
                recordings
                    .iter()
                    .position(|r| &r.subject == subject && &r.story == story)
                    .ok_or_else(|| {
                        super::DataError::Invalid(format!(
                            "split references missing recording {subject}/{story}"
                        ))
                    })
            })
            .collect()
    };
    let splits = Splits {
        train: find(&spec.train)?,
        valid: find(&spec.valid)?,
        test: find(&spec.test)?,
    };
    if splits.train.is_empty() || splits.test.is_empty() {
        return invalid("unsatisfiable split: train and test must be non-empty");
    }

    let subjects = |idx: &[usize]| -> BTreeSet<&str> {
        idx.iter().map(|&i| recordings[i].subject.as_str()).collect()
    };
    let stories = |idx: &[usize]| -> BTreeSet<&str> {
        idx.iter().map(|&i| recordings[i].story.as_str()).collect()
    };

    let mut violations = Vec::new();
    let train_subjects = subjects(&splits.train);
    let train_stories = stories(&splits.train);
    for (split_name, idx) in [("valid", &splits.valid), ("test", &splits.test)] {
        if spec.mode == SplitMode::CrossSubject {
            for s in subjects(idx).intersection(&train_subjects) {
                violations.push(SplitViolation::SubjectOverlap {
                    subject: s.to_string(),
                    split: split_name,
                });
            }
        }
        for s in stories(idx).intersection(&train_stories) {
            violations.push(SplitViolation::StoryOverlap {
                story: s.to_string(),
                split: split_name,
            });
        }
    }
    if spec.mode == SplitMode::WithinSubject {
        let mut all = subjects(&splits.train);
        all.extend(subjects(&splits.valid));
        all.extend(subjects(&splits.test));
        if all.len() > 1 {
            violations.push(SplitViolation::MultipleSubjects {
                subjects: all.into_iter().map(str::to_string).collect(),
            });
        }
    }
    Ok((splits, violations))
}

/// Builds a deterministic clean assignment: the lexicographically last story
/// becomes test and the second-to-last valid; in cross-subject mode the last
/// subject is held out with them.
pub fn auto_split(recordings: &[Recording], mode: SplitMode) -> Result<SplitSpec> {
    let mut subjects: Vec<&str> = recordings.iter().map(|r| r.subject.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let mut stories: Vec<&str> = recordings.iter().map(|r| r.story.as_str()).collect();
    stories.sort_unstable();
    stories.dedup();
    if stories.len() < 3 {
        return invalid(format!("auto_split: need at least 3 stories, have {}", stories.len()));
    }
    let test_story = stories[stories.len() - 1];
    let valid_story = stories[stories.len() - 2];

    let mut spec = SplitSpec { mode, train: vec![], valid: vec![], test: vec![] };
    match mode {
        SplitMode::WithinSubject => {
            let subject = subjects[0];
            for r in recordings.iter().filter(|r| r.subject == subject) {
                let pair = (r.subject.clone(), r.story.clone());
                if r.story == test_story {
                    spec.test.push(pair);
                } else if r.story == valid_story {
                    spec.valid.push(pair);
                } else {
                    spec.train.push(pair);
                }
            }
        }
        SplitMode::CrossSubject => {
            if subjects.len() < 2 {
                return invalid("auto_split: cross-subject mode needs at least 2 subjects");
            }
            let eval_subject = subjects[subjects.len() - 1];
            for r in recordings {
                let pair = (r.subject.clone(), r.story.clone());
                if r.subject == eval_subject {
                    if r.story == test_story {
                        spec.test.push(pair);
                    } else if r.story == valid_story {
                        spec.valid.push(pair);
                    }
                } else if r.story != test_story && r.story != valid_story {
                    spec.train.push(pair);
                }
            }
        }
    }
    if spec.train.is_empty() || spec.test.is_empty() {
        return invalid("auto_split: assignment left train or test empty");
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FmriData;
    use crate::numkit::Tensor;

    fn rec(subject: &str, story: &str) -> Recording {
        Recording {
            subject: subject.into(),
            story: story.into(),
            fmri: FmriData::Surface(Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap()),
            tr_seconds: 2.0,
            frame_words: vec![vec!["a".into()], vec!["b".into()]],
        }
    }

    fn pair(s: &str, st: &str) -> (String, String) {
        (s.to_string(), st.to_string())
    }

    #[test]
    fn clean_cross_subject_split_audits_empty() {
        let recs = vec![rec("A", "s1"), rec("B", "s2"), rec("C", "s3")];
        let spec = SplitSpec {
            mode: SplitMode::CrossSubject,
            train: vec![pair("A", "s1"), pair("B", "s2")],
            valid: vec![],
            test: vec![pair("C", "s3")],
        };
        let (splits, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit.is_empty(), "{audit:?}");
        assert_eq!(splits.train, vec![0, 1]);
        assert_eq!(splits.test, vec![2]);
    }

    #[test]
    fn subject_overlap_is_reported() {
        let recs = vec![rec("A", "s1"), rec("B", "s2"), rec("A", "s3")];
        let spec = SplitSpec {
            mode: SplitMode::CrossSubject,
            train: vec![pair("A", "s1"), pair("B", "s2")],
            valid: vec![],
            test: vec![pair("A", "s3")],
        };
        let (_, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit.iter().any(|v| matches!(
            v,
            SplitViolation::SubjectOverlap { subject, split: "test" } if subject == "A"
        )));
    }

    #[test]
    fn story_overlap_is_reported() {
        let recs = vec![rec("A", "s1"), rec("B", "s2"), rec("C", "s1")];
        let spec = SplitSpec {
            mode: SplitMode::CrossSubject,
            train: vec![pair("A", "s1"), pair("B", "s2")],
            valid: vec![],
            test: vec![pair("C", "s1")],
        };
        let (_, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit.iter().any(|v| matches!(
            v,
            SplitViolation::StoryOverlap { story, split: "test" } if story == "s1"
        )));
    }

    #[test]
    fn within_subject_multiple_subjects_flagged() {
        let recs = vec![rec("A", "s1"), rec("B", "s2"), rec("A", "s3")];
        let spec = SplitSpec {
            mode: SplitMode::WithinSubject,
            train: vec![pair("A", "s1"), pair("B", "s2")],
            valid: vec![],
            test: vec![pair("A", "s3")],
        };
        let (_, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit
            .iter()
            .any(|v| matches!(v, SplitViolation::MultipleSubjects { .. })));
    }

    #[test]
    fn missing_recording_is_an_error() {
        let recs = vec![rec("A", "s1")];
        let spec = SplitSpec {
            mode: SplitMode::WithinSubject,
            train: vec![pair("A", "s1")],
            valid: vec![],
            test: vec![pair("A", "missing")],
        };
        assert!(make_splits(&recs, &spec).is_err());
    }

    #[test]
    fn auto_split_within_subject_is_clean() {
        let recs: Vec<Recording> =
            (0..5).map(|i| rec("A", &format!("s{i}"))).collect();
        let spec = auto_split(&recs, SplitMode::WithinSubject).unwrap();
        let (splits, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit.is_empty());
        assert_eq!(splits.train.len(), 3);
        assert_eq!(splits.valid.len(), 1);
        assert_eq!(splits.test.len(), 1);
    }

    #[test]
    fn auto_split_cross_subject_is_clean() {
        let mut recs = Vec::new();
        for subject in ["A", "B", "C"] {
            for story in ["s1", "s2", "s3", "s4"] {
                recs.push(rec(subject, story));
            }
        }
        let spec = auto_split(&recs, SplitMode::CrossSubject).unwrap();
        let (splits, audit) = make_splits(&recs, &spec).unwrap();
        assert!(audit.is_empty(), "{audit:?}");
        assert_eq!(splits.train.len(), 4); // A,B x s1,s2
        assert_eq!(splits.valid.len(), 1); // C/s3
        assert_eq!(splits.test.len(), 1); // C/s4
    }

    #[test]
    fn auto_split_cross_subject_needs_two_subjects() {
        let recs: Vec<Recording> =
            (0..4).map(|i| rec("A", &format!("s{i}"))).collect();
        assert!(auto_split(&recs, SplitMode::CrossSubject).is_err());
    }
}
