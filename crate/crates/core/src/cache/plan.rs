use alloc::vec::Vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum StepTag {
    Full,
    Partial,
}

/// Per-step tags in denoising order, with the offset `k` of each step from
/// the most recent Full step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepPlan {
    tags: Vec<StepTag>,
    offsets: Vec<usize>,
}

impl StepPlan {
    pub fn from_tags(tags: Vec<StepTag>) -> Self {
        let mut offsets = Vec::with_capacity(tags.len());
        let mut k = 0;
        for (i, tag) in tags.iter().enumerate() {
            k = if *tag == StepTag::Full || i == 0 { 0 } else { k + 1 };
            offsets.push(k);
        }
        Self { tags, offsets }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tags(&self) -> &[StepTag] {
        &self.tags
    }

    pub fn tag(&self, step: usize) -> StepTag {
        self.tags[step]
    }

    pub fn offset(&self, step: usize) -> usize {
        self.offsets[step]
    }

    pub fn full_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == StepTag::Full)
            .map(|(i, _)| i)
    }

    pub fn full_count(&self) -> usize {
        self.full_steps().count()
    }
}

/// Full at every step index `≡ 0 (mod N)`, Partial elsewhere.
///
/// With `rearrange_last`, a Partial final step takes over the latest
/// non-initial Full step so the Full count is unchanged. A plan whose only
/// Full step is the first one has nothing to relocate and is left alone.
pub fn plan_schedule(steps: usize, interval: usize, rearrange_last: bool) -> StepPlan {
    let interval = interval.max(1);
    let mut tags: Vec<StepTag> = (0..steps)
        .map(|i| if i % interval == 0 { StepTag::Full } else { StepTag::Partial })
        .collect();
    if rearrange_last && steps > 1 && tags[steps - 1] == StepTag::Partial {
        if let Some(latest) = (1..steps).rev().find(|&i| tags[i] == StepTag::Full) {
            tags[latest] = StepTag::Partial;
            tags[steps - 1] = StepTag::Full;
        }
    }
    StepPlan::from_tags(tags)
}
