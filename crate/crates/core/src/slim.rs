//! Width lists and pruned architectures: which channels each sub-network
//! uses, expressed as per-group retained counts.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::GraphIndex;

/// Strictly increasing width multipliers; the last entry is the full width.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthList(Vec<f64>);

impl WidthList {
    pub fn new(widths: Vec<f64>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Invalid(alloc::format!(
                "width list needs at least two entries, got {}",
                widths.len()
            )));
        }
        for pair in widths.windows(2) {
            if pair[0] >= pair[1] {
                return Err(Error::Invalid(alloc::string::String::from(
                    "width list must be strictly increasing",
                )));
            }
        }
        if widths[0] <= 0.0 {
            return Err(Error::Invalid(alloc::string::String::from(
                "widths must be positive",
            )));
        }
        if (widths[widths.len() - 1] - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(alloc::string::String::from(
                "last width must be the full width 1.0",
            )));
        }
        Ok(WidthList(widths))
    }

    pub fn widths(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn full(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

/// Per-group retained channel counts of one sub-network.
///
/// Counts alone pin a sub-network down because execution always takes the
/// first `count` channels of each (sorted) group; the index sets behind the
/// counts live in `SelectionPlan`s during pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedArchitecture {
    /// Network input channels (never sliced).
    pub input_channels: usize,
    /// Retained channels per group, in group order.
    pub counts: Vec<usize>,
    /// Width this architecture stands in for.
    pub source_width: f64,
    /// Cached multiply-accumulate count (join policy of the producing plan).
    pub flops: u64,
}

impl PrunedArchitecture {
    /// Validate counts against a graph: every group keeps between 1 and its
    /// full size, non-prunable groups stay full.
    pub fn check(&self, index: &GraphIndex) -> Result<()> {
        if self.counts.len() != index.groups.len() {
            return Err(Error::LengthMismatch {
                at: alloc::string::String::from("architecture counts"),
                expected: index.groups.len(),
                got: self.counts.len(),
            });
        }
        if self.input_channels != index.input_channels {
            return Err(Error::Dimension {
                at: alloc::string::String::from("architecture input"),
                detail: alloc::format!(
                    "expected {} input channels, got {}",
                    index.input_channels,
                    self.input_channels
                ),
            });
        }
        for (g, (&count, info)) in self.counts.iter().zip(&index.groups).enumerate() {
            if count == 0 || count > info.size {
                return Err(Error::IndexOutOfRange {
                    at: alloc::format!("group {g} ({})", info.name),
                    index: count,
                    limit: info.size,
                });
            }
            if !info.prunable && count != info.size {
                return Err(Error::Invalid(alloc::format!(
                    "group {g} ({}) is not prunable but count {count} < {}",
                    info.name, info.size
                )));
            }
        }
        Ok(())
    }

    /// Uniform width-multiplier architecture: `max(1, floor(w * N))` channels
    /// in every slimmable group.
    pub fn uniform(index: &GraphIndex, width: f64) -> Self {
        let counts = (0..index.groups.len())
            .map(|g| index.group_count_at_width(g, width))
            .collect();
        PrunedArchitecture {
            input_channels: index.input_channels,
            counts,
            source_width: width,
            flops: 0,
        }
    }

    /// Full-width architecture.
    pub fn full(index: &GraphIndex) -> Self {
        PrunedArchitecture::uniform(index, 1.0)
    }

    pub fn is_full(&self, index: &GraphIndex) -> bool {
        self.counts
            .iter()
            .zip(&index.groups)
            .all(|(&c, g)| c == g.size)
    }

    /// True when every group keeps at most as many channels as `other`.
    pub fn dominated_by(&self, other: &PrunedArchitecture) -> bool {
        self.counts
            .iter()
            .zip(&other.counts)
            .all(|(&a, &b)| a <= b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_list_validation() {
        assert!(WidthList::new(alloc::vec![0.25, 0.5, 1.0]).is_ok());
        assert!(WidthList::new(alloc::vec![1.0]).is_err());
        assert!(WidthList::new(alloc::vec![0.5, 0.5, 1.0]).is_err());
        assert!(WidthList::new(alloc::vec![0.5, 0.75]).is_err());
        assert!(WidthList::new(alloc::vec![-0.5, 1.0]).is_err());
    }

    #[test]
    fn uniform_counts_floor_and_clamp() {
        let spec = crate::zoo::micro_vgg();
        let index = spec.index().unwrap();
        let arch = PrunedArchitecture::uniform(&index, 0.3);
        // first stage has 8 channels: floor(0.3 * 8) = 2
        assert_eq!(arch.counts[0], 2);
        let tiny = PrunedArchitecture::uniform(&index, 0.01);
        assert!(tiny.counts.iter().all(|&c| c >= 1));
        // classifier group stays full
        let last = index.groups.len() - 1;
        assert_eq!(tiny.counts[last], index.groups[last].size);
    }
}
