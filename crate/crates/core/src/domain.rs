//! Domain identifiers shared by normalization layers, datasets, and losses.

use core::fmt;

/// Tag for one domain in an adaptation problem: one of the contiguous source
/// domains or the single target domain.
///
/// The derived ordering places sources (by index) before the target, which
/// fixes the branch iteration order everywhere an ordered map over domains
/// is used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DomainId {
    Source(u16),
    Target,
}

impl DomainId {
    pub fn is_source(self) -> bool {
        matches!(self, DomainId::Source(_))
    }

    pub fn is_target(self) -> bool {
        self == DomainId::Target
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DomainId::Source(i) => write!(f, "source{i}"),
            DomainId::Target => write!(f, "target"),
        }
    }
}
