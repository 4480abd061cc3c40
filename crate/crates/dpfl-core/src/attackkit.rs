//! Poisoning transforms (backdoor, distributed backdoor, label flip) applied
//! to local datasets, and model-replacement scaling of malicious updates.
//!
//! Attack construction never mutates the base dataset: a [`PoisonedView`]
//! records which examples an attacker touches and materializes poisoned
//! copies on demand.

use serde::{Deserialize, Serialize};

use crate::datakit::{Dataset, LabeledExample, Partition};
use crate::error::{DpflError, Result};

/// Sparse trigger: feature index -> value written at that index.
pub type Pattern = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    /// BKD: trigger pattern plus target label.
    Backdoor,
    /// LF: source-class labels replaced by the target label.
    LabelFlip,
    /// DBA: the trigger split across k adversarial users.
    DistributedBackdoor,
}

/// Whether `k` counts adversarial users or poisoned instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackLevel {
    User,
    Instance,
}

/// Full description of a poisoning attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Count of adversarial users (user level) or poisoned instances
    /// (instance level).
    pub k: usize,
    /// Fraction of each adversarial user's local data that gets poisoned.
    pub poison_fraction: f64,
    /// Model-replacement scale gamma applied to malicious updates.
    pub scale: f64,
    /// Trigger pattern as index:value pairs.
    pub pattern: Pattern,
    pub target_label: usize,
    /// Source class for label flipping.
    pub source_class: Option<usize>,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.poison_fraction) {
            return Err(DpflError::Config(format!(
                "poison_fraction must be in [0, 1], got {}",
                self.poison_fraction
            )));
        }
        if self.scale < 1.0 {
            return Err(DpflError::Config(format!(
                "scale must be >= 1, got {}",
                self.scale
            )));
        }
        match self.kind {
            AttackKind::DistributedBackdoor => {
                if self.k == 0 {
                    return Err(DpflError::Config(
                        "distributed backdoor needs at least one attacker".into(),
                    ));
                }
                if self.k > self.pattern.len() {
                    return Err(DpflError::Config(format!(
                        "cannot decompose a {}-pixel pattern into {} parts",
                        self.pattern.len(),
                        self.k
                    )));
                }
            }
            AttackKind::LabelFlip => {
                if self.source_class.is_none() {
                    return Err(DpflError::Config(
                        "label flipping needs a source class".into(),
                    ));
                }
            }
            AttackKind::Backdoor => {}
        }
        Ok(())
    }
}

/// Writes the pattern values (clamped to `[0, 1]`) at their feature indices
/// and sets the label to the target. Idempotent.
pub fn apply_backdoor(
    example: &LabeledExample,
    pattern: &[(usize, f64)],
    target_label: usize,
) -> Result<LabeledExample> {
    let mut out = example.clone();
    for &(index, value) in pattern {
        let slot = out.features.get_mut(index).ok_or_else(|| {
            DpflError::Pattern(format!(
                "pattern index {index} out of range for {} features",
                example.features.len()
            ))
        })?;
        *slot = value.clamp(0.0, 1.0);
    }
    out.label = target_label;
    Ok(out)
}

/// Splits a pattern into `k` disjoint sub-patterns whose union is the whole
/// pattern and whose sizes differ by at most one.
pub fn decompose_dba(pattern: &[(usize, f64)], k: usize) -> Result<Vec<Pattern>> {
    if k == 0 || k > pattern.len() {
        return Err(DpflError::Config(format!(
            "cannot decompose a {}-pixel pattern into {k} parts",
            pattern.len()
        )));
    }
    let base = pattern.len() / k;
    let remainder = pattern.len() % k;
    let mut parts = Vec::with_capacity(k);
    let mut cursor = 0;
    for part in 0..k {
        let size = base + usize::from(part < remainder);
        parts.push(pattern[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(parts)
}

/// Replaces the label with the target iff it currently equals the source
/// class; features are never touched.
pub fn flip_label(
    example: &LabeledExample,
    source_class: usize,
    target_label: usize,
) -> LabeledExample {
    let mut out = example.clone();
    if out.label == source_class {
        out.label = target_label;
    }
    out
}

/// Model replacement: multiply every component of the update by gamma.
pub fn scale_update(delta: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if gamma < 1.0 {
        return Err(DpflError::Config(format!(
            "model-replacement scale must be >= 1, got {gamma}"
        )));
    }
    Ok(delta.iter().map(|d| d * gamma).collect())
}

#[derive(Debug, Clone)]
enum PoisonOp {
    /// Apply `patterns[id]` and set the target label.
    Backdoor { pattern_id: usize },
    /// Flip the label if it matches the source class.
    Flip,
}

/// Immutable poisoning overlay over a dataset + partition.
#[derive(Debug, Clone)]
pub struct PoisonedView {
    spec: AttackSpec,
    patterns: Vec<Pattern>,
    /// Per global example index: the transform the attacker applies, if any.
    ops: Vec<Option<PoisonOp>>,
    /// Users whose updates get the model-replacement scale.
    adversarial_users: Vec<usize>,
}

impl PoisonedView {
    /// User-level attack: the `k` lowest-indexed users are adversarial and
    /// each poisons the first `ceil(poison_fraction * |D_i|)` examples of
    /// its local list. For DBA, user `i` embeds sub-pattern `i`.
    pub fn user_level(data: &Dataset, partition: &Partition, spec: &AttackSpec) -> Result<Self> {
        spec.validate()?;
        if spec.k > partition.num_users() {
            return Err(DpflError::Config(format!(
                "{} adversarial users but only {} users",
                spec.k,
                partition.num_users()
            )));
        }
        let patterns = match spec.kind {
            AttackKind::DistributedBackdoor => decompose_dba(&spec.pattern, spec.k)?,
            _ => vec![spec.pattern.clone()],
        };
        let mut ops = vec![None; data.len()];
        for user in 0..spec.k {
            let local = &partition.user_indices[user];
            let poisoned = ceil_fraction(spec.poison_fraction, local.len());
            for &global in local.iter().take(poisoned) {
                ops[global] = Some(match spec.kind {
                    AttackKind::Backdoor => PoisonOp::Backdoor { pattern_id: 0 },
                    AttackKind::DistributedBackdoor => PoisonOp::Backdoor { pattern_id: user },
                    AttackKind::LabelFlip => PoisonOp::Flip,
                });
            }
        }
        Ok(PoisonedView {
            spec: spec.clone(),
            patterns,
            ops,
            adversarial_users: (0..spec.k).collect(),
        })
    }

    /// Instance-level attack: exactly `k` poisoned instances, concentrated
    /// in the lowest-indexed user's local dataset (the worst case for a
    /// single user). No model replacement at this level.
    pub fn instance_level(
        data: &Dataset,
        partition: &Partition,
        spec: &AttackSpec,
    ) -> Result<Self> {
        spec.validate()?;
        if matches!(spec.kind, AttackKind::DistributedBackdoor) {
            return Err(DpflError::Config(
                "distributed backdoor is a user-level attack".into(),
            ));
        }
        let local = &partition.user_indices[0];
        if spec.k > local.len() {
            return Err(DpflError::Config(format!(
                "{} poisoned instances exceed the host user's {} examples",
                spec.k,
                local.len()
            )));
        }
        let mut ops = vec![None; data.len()];
        for &global in local.iter().take(spec.k) {
            ops[global] = Some(match spec.kind {
                AttackKind::Backdoor => PoisonOp::Backdoor { pattern_id: 0 },
                AttackKind::LabelFlip => PoisonOp::Flip,
                AttackKind::DistributedBackdoor => unreachable!(),
            });
        }
        Ok(PoisonedView {
            spec: spec.clone(),
            patterns: vec![spec.pattern.clone()],
            ops,
            adversarial_users: Vec::new(),
        })
    }

    pub fn spec(&self) -> &AttackSpec {
        &self.spec
    }

    pub fn poisoned_count(&self) -> usize {
        self.ops.iter().filter(|op| op.is_some()).count()
    }

    pub fn is_adversarial_user(&self, user: usize) -> bool {
        self.adversarial_users.contains(&user)
    }

    /// The example as the training loop sees it: poisoned if flagged,
    /// otherwise a plain copy of the base.
    pub fn example(&self, data: &Dataset, global_index: usize) -> Result<LabeledExample> {
        let base = &data.examples[global_index];
        match &self.ops[global_index] {
            None => Ok(base.clone()),
            Some(PoisonOp::Backdoor { pattern_id }) => {
                apply_backdoor(base, &self.patterns[*pattern_id], self.spec.target_label)
            }
            Some(PoisonOp::Flip) => Ok(flip_label(
                base,
                self.spec.source_class.expect("validated"),
                self.spec.target_label,
            )),
        }
    }
}

pub(crate) fn ceil_fraction(fraction: f64, total: usize) -> usize {
    // Ceiling guarantees at least one poisoned sample whenever fraction > 0.
    ((fraction * total as f64).ceil() as usize).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::{partition_iid, synthesize_blobs};

    fn example() -> LabeledExample {
        LabeledExample {
            features: vec![0.1, 0.2, 0.3, 0.4],
            label: 1,
        }
    }

    fn spec(kind: AttackKind, k: usize) -> AttackSpec {
        AttackSpec {
            kind,
            k,
            poison_fraction: 1.0,
            scale: 1.0,
            pattern: vec![(1, 1.0), (2, 1.0), (3, 1.0)],
            target_label: 0,
            source_class: Some(1),
        }
    }

    #[test]
    fn empty_pattern_only_changes_label() {
        let ex = example();
        let out = apply_backdoor(&ex, &[], 0).unwrap();
        assert_eq!(out.features, ex.features);
        assert_eq!(out.label, 0);
    }

    #[test]
    fn backdoor_sets_exactly_the_pattern_pixels() {
        let ex = example();
        let out = apply_backdoor(&ex, &[(1, 1.0), (2, 1.0), (3, 1.0)], 0).unwrap();
        assert_eq!(out.features, vec![0.1, 1.0, 1.0, 1.0]);
        assert_eq!(out.label, 0);
    }

    #[test]
    fn backdoor_is_idempotent() {
        let ex = example();
        let pattern = [(0, 0.9), (3, 0.0)];
        let once = apply_backdoor(&ex, &pattern, 0).unwrap();
        let twice = apply_backdoor(&once, &pattern, 0).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn backdoor_out_of_range_index_is_pattern_error() {
        let ex = example();
        assert!(matches!(
            apply_backdoor(&ex, &[(4, 1.0)], 0),
            Err(DpflError::Pattern(_))
        ));
    }

    #[test]
    fn dba_singletons_when_k_equals_pattern_size() {
        let pattern = vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)];
        let parts = decompose_dba(&pattern, 4).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn dba_identity_at_k1_and_sizes_for_uneven_split() {
        let pattern = vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0), (4, 1.0)];
        assert_eq!(decompose_dba(&pattern, 1).unwrap(), vec![pattern.clone()]);
        let parts = decompose_dba(&pattern, 2).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2]);
        assert!(decompose_dba(&pattern, 6).is_err());
    }

    #[test]
    fn dba_composition_equals_full_pattern() {
        let pattern = vec![(0, 0.7), (1, 1.0), (2, 0.4), (3, 1.0), (4, 0.2)];
        let ex = LabeledExample {
            features: vec![0.5; 5],
            label: 1,
        };
        for k in 1..=5 {
            let mut sequential = ex.clone();
            for part in decompose_dba(&pattern, k).unwrap() {
                sequential = apply_backdoor(&sequential, &part, 0).unwrap();
            }
            let full = apply_backdoor(&ex, &pattern, 0).unwrap();
            assert_eq!(sequential, full, "k = {k}");
        }
    }

    #[test]
    fn flip_label_semantics() {
        let ex = example();
        assert_eq!(flip_label(&ex, 1, 0).label, 0);
        assert_eq!(flip_label(&ex, 0, 1), ex);
        let identity = flip_label(&ex, 1, 1);
        assert_eq!(identity, ex);
        assert_eq!(flip_label(&ex, 1, 0).features, ex.features);
    }

    #[test]
    fn scale_update_behaviour() {
        assert_eq!(scale_update(&[1.0, -2.0], 1.0).unwrap(), vec![1.0, -2.0]);
        let scaled = scale_update(&[0.06, 0.08], 50.0).unwrap();
        let norm: f64 = scaled.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(scale_update(&[0.0, 0.0], 7.0).unwrap(), vec![0.0, 0.0]);
        assert!(scale_update(&[1.0], 0.5).is_err());
    }

    #[test]
    fn user_level_view_flags_ceil_fraction_per_attacker() {
        let data = synthesize_blobs(20, 4, 2, 6.0, 1).unwrap();
        let partition = partition_iid(&data, 4, 2).unwrap();
        let mut s = spec(AttackKind::Backdoor, 2);
        s.poison_fraction = 0.5;
        let view = PoisonedView::user_level(&data, &partition, &s).unwrap();
        // ceil(0.5 * 5) = 3 poisoned examples in each of the 2 attackers.
        assert_eq!(view.poisoned_count(), 6);
        assert!(view.is_adversarial_user(0) && view.is_adversarial_user(1));
        assert!(!view.is_adversarial_user(2));
    }

    #[test]
    fn view_construction_never_mutates_base() {
        let data = synthesize_blobs(20, 4, 2, 6.0, 1).unwrap();
        let snapshot = data.clone();
        let partition = partition_iid(&data, 4, 2).unwrap();
        let view = PoisonedView::user_level(&data, &partition, &spec(AttackKind::Backdoor, 4)).unwrap();
        for i in 0..data.len() {
            let _ = view.example(&data, i).unwrap();
        }
        assert_eq!(data, snapshot);
    }

    #[test]
    fn instance_level_flags_exactly_k_for_any_partition() {
        let data = synthesize_blobs(24, 4, 2, 6.0, 1).unwrap();
        for (users, seed) in [(2, 0u64), (3, 5), (4, 9)] {
            let partition = partition_iid(&data, users, seed).unwrap();
            let view =
                PoisonedView::instance_level(&data, &partition, &spec(AttackKind::LabelFlip, 5))
                    .unwrap();
            assert_eq!(view.poisoned_count(), 5);
            assert!(view.adversarial_users.is_empty());
        }
    }

    #[test]
    fn poisoned_examples_carry_the_trigger() {
        let data = synthesize_blobs(12, 4, 2, 6.0, 1).unwrap();
        let partition = partition_iid(&data, 3, 0).unwrap();
        let view = PoisonedView::user_level(&data, &partition, &spec(AttackKind::Backdoor, 1)).unwrap();
        let local = &partition.user_indices[0];
        for &global in local {
            let ex = view.example(&data, global).unwrap();
            assert_eq!(ex.label, 0);
            assert_eq!(&ex.features[1..4], &[1.0, 1.0, 1.0]);
        }
        let honest = &partition.user_indices[1];
        for &global in honest {
            assert_eq!(view.example(&data, global).unwrap(), data.examples[global]);
        }
    }
}
