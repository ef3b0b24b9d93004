use crate::error::Result;
use crate::volume::{ProbMap, Volume};

/// Anything that maps a volume to a soft foreground prediction of the same
/// geometry. Implementations must be deterministic.
pub trait Segmenter: Sync {
    fn predict_soft(&self, volume: &Volume) -> Result<ProbMap>;
}

impl<F> Segmenter for F
where
    F: Fn(&Volume) -> Result<ProbMap> + Sync,
{
    fn predict_soft(&self, volume: &Volume) -> Result<ProbMap> {
        self(volume)
    }
}
