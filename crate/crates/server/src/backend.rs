use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use lelsd_core::generator::{GeneratorBackend, PlantedGenerator};
use lelsd_core::segmentation::{HalfPlaneSegmenter, SegmenterBackend};
use lelsd_core::{LelsdError, Result};

/// Generator selection on the command line: `planted[:SEED]` or
/// `planted-linear[:SEED]`. The seed defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendSpec {
    pub linearized: bool,
    pub seed: u64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec { linearized: false, seed: 1 }
    }
}

impl FromStr for BackendSpec {
    type Err = LelsdError;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, seed) = match s.split_once(':') {
            Some((kind, seed)) => {
                let seed = seed
                    .parse()
                    .map_err(|_| LelsdError::InvalidInput(format!("backend seed `{seed}` is not an integer")))?;
                (kind, seed)
            }
            None => (s, 1),
        };
        let linearized = match kind {
            "planted" => false,
            "planted-linear" => true,
            other => return Err(LelsdError::InvalidInput(format!("unknown backend `{other}`"))),
        };
        Ok(BackendSpec { linearized, seed })
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.linearized { "planted-linear" } else { "planted" };
        write!(f, "{kind}:{}", self.seed)
    }
}

/// A generator together with the segmenter that matches its image size.
#[derive(Clone)]
pub struct Backends {
    pub generator: Arc<dyn GeneratorBackend>,
    pub segmenter: Arc<dyn SegmenterBackend>,
}

impl BackendSpec {
    pub fn build(&self) -> Backends {
        let generator =
            if self.linearized { PlantedGenerator::linearized(self.seed) } else { PlantedGenerator::seeded(self.seed) };
        let (_, h, w) = generator.image_shape();
        Backends { generator: Arc::new(generator), segmenter: Arc::new(HalfPlaneSegmenter::new(h, w)) }
    }
}
