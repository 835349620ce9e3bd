use crate::error::{CoreError, Result};

/// Per-tag scores with the macro mean over tags that have both classes.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroScore {
    pub mean: f64,
    /// `None` for tags excluded because only one class is present.
    pub per_tag: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CoreError::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::invalid("non-finite score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve from the midrank statistic; `None` when a class
/// is absent.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let (n_pos, n_neg) = check_binary(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let mid2 = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        rank2_pos += mid2 * pos_in_group;
        i = j + 1;
    }
    let np = n_pos as u64;
    let u2 = rank2_pos - np * (np + 1);
    Ok(Some(u2 as f64 / (2 * np * n_neg as u64) as f64))
}

/// Average precision with tied scores evaluated as one threshold; `None`
/// when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<Option<f64>> {
    let (n_pos, _) = check_binary(scores, labels)?;
    if n_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        tp += group_pos;
        seen += j - i + 1;
        if group_pos > 0 {
            ap += (group_pos as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(Some(ap))
}

fn macro_over_tags(
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    per_tag: fn(&[f64], &[bool]) -> Result<Option<f64>>,
) -> Result<MacroScore> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CoreError::invalid("score and label matrices differ in clip count"));
    }
    let n_tags = scores[0].len();
    if scores.iter().any(|r| r.len() != n_tags)
        || labels.iter().any(|r| r.len() != n_tags)
    {
        return Err(CoreError::invalid("ragged score or label matrix"));
    }
    let mut values = Vec::with_capacity(n_tags);
    let mut excluded = Vec::new();
    for tag in 0..n_tags {
        let s: Vec<f64> = scores.iter().map(|r| r[tag]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[tag]).collect();
        let single_class = l.iter().all(|&x| x) || l.iter().all(|&x| !x);
        let v = if single_class { None } else { per_tag(&s, &l)? };
        if v.is_none() {
            excluded.push(tag);
        }
        values.push(v);
    }
    let valid: Vec<f64> = values.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(CoreError::invalid("no tag has both classes present"));
    }
    Ok(MacroScore {
        mean: valid.iter().sum::<f64>() / valid.len() as f64,
        per_tag: values,
        excluded,
    })
}

/// Macro ROC-AUC over tags (columns). Single-class tags are excluded.
pub fn roc_auc_macro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroScore> {
    macro_over_tags(scores, labels, roc_auc)
}

/// Macro average precision over tags. Single-class tags are excluded so the
/// tag set matches [`roc_auc_macro`].
pub fn average_precision_macro(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MacroScore> {
    macro_over_tags(scores, labels, average_precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        let s = [0.1, 0.2, 0.8, 0.9];
        let l = [false, false, true, true];
        assert_eq!(roc_auc(&s, &l).unwrap(), Some(1.0));
        assert_eq!(average_precision(&s, &l).unwrap(), Some(1.0));
    }

    #[test]
    fn single_positive_at_rank_k() {
        for k in 1..=6 {
            let n = 6;
            let s: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let l: Vec<bool> = (0..n).map(|i| i == k - 1).collect();
            let ap = average_precision(&s, &l).unwrap().unwrap();
            assert!((ap - 1.0 / k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn five_by_five_pair_count() {
        let s = [0.9, 0.3, 0.5, 0.5, 0.1, 0.7, 0.5, 0.2, 0.8, 0.05];
        let l = [true, false, true, false, false, true, true, false, false, true];
        let mut wins = 0.0;
        for i in 0..10 {
            for j in 0..10 {
                if l[i] && !l[j] {
                    wins += if s[i] > s[j] {
                        1.0
                    } else if s[i] == s[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(roc_auc(&s, &l).unwrap().unwrap(), wins / 25.0);
    }

    #[test]
    fn random_scores_are_near_chance() {
        let n = 20000;
        let u = |i: u64| (mirssl_autodiff::mix64(i) >> 11) as f64 / (1u64 << 53) as f64;
        let s: Vec<f64> = (0..n).map(|i| u(i as u64)).collect();
        let l: Vec<bool> = (0..n).map(|i| u(i as u64 + 1_000_000) < 0.3).collect();
        let auc = roc_auc(&s, &l).unwrap().unwrap();
        assert!((auc - 0.5).abs() < 0.02, "{auc}");
    }

    #[test]
    fn degenerate_tags_excluded() {
        let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.4, 0.6], vec![0.5, 0.5, 0.1]];
        let labels = vec![
            vec![true, false, true],
            vec![false, false, true],
            vec![true, false, true],
        ];
        let auc = roc_auc_macro(&scores, &labels).unwrap();
        assert_eq!(auc.excluded, vec![1, 2]);
        assert_eq!(auc.per_tag[0], Some(1.0));
        assert_eq!(auc.mean, 1.0);
        let ap = average_precision_macro(&scores, &labels).unwrap();
        assert_eq!(ap.excluded, vec![1, 2]);

        let all_single = vec![vec![0.1], vec![0.2]];
        assert!(roc_auc_macro(&all_single, &[vec![true], vec![true]]).is_err());
    }
}
