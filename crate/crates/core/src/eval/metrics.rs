use crate::error::{Error, Result};

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (ROUGE-L style); 0 when either side is empty or nothing matches.
pub fn lcs_f1<T: PartialEq>(reference: &[T], candidate: &[T]) -> f64 {
    let l = lcs_len(reference, candidate);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mann–Whitney AUC of "lower loss means member": the share of
/// (member, non-member) pairs where the member's loss is lower, ties counting half.
pub fn mia_auc(member_losses: &[f64], nonmember_losses: &[f64]) -> Result<f64> {
    if member_losses.is_empty() || nonmember_losses.is_empty() {
        return Err(Error::Config(
            "membership inference needs member and non-member losses".into(),
        ));
    }
    let mut wins = 0.0;
    for &m in member_losses {
        for &n in nonmember_losses {
            if m < n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (member_losses.len() * nonmember_losses.len()) as f64)
}

/// Maps an attack AUC to `[0, 1]` so that chance-level attacks score 1.
pub fn mia_from_auc(auc: f64) -> f64 {
    1.0 - 2.0 * (auc - 0.5).abs()
}

/// Mean of the three component scores.
pub fn final_score(mia: f64, tas: f64, capability: f64) -> Result<f64> {
    for (name, v) in [("mia", mia), ("tas", tas), ("capability", capability)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!(
                "{name} score {v} is outside [0, 1]"
            )));
        }
    }
    Ok((mia + tas + capability) / 3.0)
}

/// Three-decimal display string used in reports and console tables.
pub fn display3(v: f64) -> String {
    format!("{v:.3}")
}
