//! Generator backends and the planted toy generator.
//!
//! A backend maps a latent code to an ordered set of featuremaps whose last
//! entry is the output image `(3, H, W)` in `[-1, 1]`. Differentiable
//! backends also pull a gradient on those featuremaps back to the code.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LelsdError, Result};
use crate::latent::{LatentCode, LatentSpace, SpaceKind};

/// `(channels, height, width)` of one featuremap.
pub type LayerShape = (usize, usize, usize);

/// Activations of every scored layer; the final entry is the image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    layers: Vec<Array3<f64>>,
}

impl FeatureMapSet {
    pub fn new(layers: Vec<Array3<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LelsdError::InvalidInput("featuremap set needs at least the image".into()));
        }
        for pair in layers.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if h1 < h0 || w1 < w0 {
                return Err(LelsdError::ShapeMismatch("layer resolutions must be non-decreasing".into()));
            }
        }
        if layers.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
            return Err(LelsdError::InvalidInput("featuremaps contain non-finite values".into()));
        }
        Ok(FeatureMapSet { layers })
    }

    pub fn layers(&self) -> &[Array3<f64>] {
        &self.layers
    }

    pub fn image(&self) -> &Array3<f64> {
        self.layers.last().expect("non-empty by construction")
    }

    pub fn into_image(mut self) -> Array3<f64> {
        self.layers.pop().expect("non-empty by construction")
    }
}

pub trait GeneratorBackend: Send + Sync {
    fn space(&self) -> &LatentSpace;

    /// Shapes of the featuremaps returned by [`forward`](Self::forward), image last.
    fn layer_shapes(&self) -> &[LayerShape];

    /// Stable content hash of the backend identity and parameters.
    fn fingerprint(&self) -> String;

    fn forward(&self, code: &LatentCode) -> Result<FeatureMapSet>;

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Gradient of `L = sum_l <seed_l, layer_l(code)>` with respect to the code.
    fn forward_with_gradients(&self, code: &LatentCode, seeds: &[Array3<f64>]) -> Result<Vec<f64>> {
        let _ = (code, seeds);
        Err(LelsdError::UnsupportedCapability("backend is not differentiable".into()))
    }

    fn image_shape(&self) -> LayerShape {
        *self.layer_shapes().last().expect("at least one layer")
    }
}

/// Reconstruction parameters of a [`PlantedGenerator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub seed: u64,
    /// Replace the tanh squashing with the identity.
    #[serde(default)]
    pub linearized: bool,
}

impl PlantedConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LelsdError::InvalidInput(format!("planted config: {e}")))
    }
}

pub const PLANTED_LATENT_DIM: usize = 8;
const HIDDEN: LayerShape = (4, 8, 8);
const IMAGE: LayerShape = (3, 16, 16);
const HALF_DIM: usize = PLANTED_LATENT_DIM / 2;

/// Toy generator with a planted spatial structure.
///
/// Latent coordinates `0..4` drive only the left half (columns `[0, W/2)`)
/// of every featuremap and coordinates `4..8` only the right half. The
/// hidden layer is `(4, 8, 8)`, the image `(3, 16, 16)`:
///
/// ```text
/// hidden[c,i,j] = act(b0[c,i,j] + sum_k w0[c,i,j,k] * z[half(j)*4 + k])
/// image[c,i,j]  = act(b1[c,i,j] + sum_d mix[c,d] * hidden[d,i/2,j/2]
///                               + sum_k skip[c,i,j,k] * z[half(j)*4 + k])
/// ```
///
/// where `act` is `tanh`, or the identity for the linearized variant.
#[derive(Debug, Clone)]
pub struct PlantedGenerator {
    config: PlantedConfig,
    space: LatentSpace,
    shapes: Vec<LayerShape>,
    w0: Array4<f64>,
    b0: Array3<f64>,
    mix: ndarray::Array2<f64>,
    skip: Array4<f64>,
    b1: Array3<f64>,
}

impl PlantedGenerator {
    pub fn new(config: PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |scale: f64| -> f64 {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        };
        let (hc, hh, hw) = HIDDEN;
        let (ic, ih, iw) = IMAGE;
        let w0 = Array4::from_shape_simple_fn((hc, hh, hw, HALF_DIM), || normal(0.5));
        let b0 = Array3::from_shape_simple_fn(HIDDEN, || normal(0.3));
        let mix = ndarray::Array2::from_shape_simple_fn((ic, hc), || normal(0.5));
        let skip = Array4::from_shape_simple_fn((ic, ih, iw, HALF_DIM), || normal(0.25));
        let b1 = Array3::from_shape_simple_fn(IMAGE, || normal(0.3));
        PlantedGenerator {
            config,
            space: LatentSpace::flat(SpaceKind::Z, PLANTED_LATENT_DIM).expect("valid space"),
            shapes: vec![HIDDEN, IMAGE],
            w0,
            b0,
            mix,
            skip,
            b1,
        }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(PlantedConfig { seed, linearized: false })
    }

    pub fn linearized(seed: u64) -> Self {
        Self::new(PlantedConfig { seed, linearized: true })
    }

    pub fn config(&self) -> PlantedConfig {
        self.config
    }

    fn act(&self, x: f64) -> f64 {
        if self.config.linearized {
            x
        } else {
            x.tanh()
        }
    }

    /// Derivative of the activation given its output.
    fn act_grad(&self, y: f64) -> f64 {
        if self.config.linearized {
            1.0
        } else {
            1.0 - y * y
        }
    }

    fn offset(width: usize, j: usize) -> usize {
        if j < width / 2 {
            0
        } else {
            HALF_DIM
        }
    }

    fn check(&self, code: &LatentCode) -> Result<()> {
        self.space.ensure_same(code.space())
    }

    fn run(&self, z: &[f64]) -> (Array3<f64>, Array3<f64>) {
        let (_, _, hw) = HIDDEN;
        let hidden = Array3::from_shape_fn(HIDDEN, |(c, i, j)| {
            let off = Self::offset(hw, j);
            let mut pre = self.b0[[c, i, j]];
            for k in 0..HALF_DIM {
                pre += self.w0[[c, i, j, k]] * z[off + k];
            }
            self.act(pre)
        });
        let (_, _, iw) = IMAGE;
        let (hc, _, _) = HIDDEN;
        let image = Array3::from_shape_fn(IMAGE, |(c, i, j)| {
            let off = Self::offset(iw, j);
            let mut pre = self.b1[[c, i, j]];
            for d in 0..hc {
                pre += self.mix[[c, d]] * hidden[[d, i / 2, j / 2]];
            }
            for k in 0..HALF_DIM {
                pre += self.skip[[c, i, j, k]] * z[off + k];
            }
            self.act(pre)
        });
        (hidden, image)
    }
}

impl GeneratorBackend for PlantedGenerator {
    fn space(&self) -> &LatentSpace {
        &self.space
    }

    fn layer_shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"lelsd/planted/v1");
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update([self.config.linearized as u8]);
        let weights = self.w0.iter().chain(&self.b0).chain(&self.mix).chain(&self.skip).chain(&self.b1);
        for v in weights {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        format!("planted-{}", &hex[..32])
    }

    fn forward(&self, code: &LatentCode) -> Result<FeatureMapSet> {
        self.check(code)?;
        let (hidden, image) = self.run(code.values());
        FeatureMapSet::new(vec![hidden, image])
    }

    fn is_differentiable(&self) -> bool {
        true
    }

    fn forward_with_gradients(&self, code: &LatentCode, seeds: &[Array3<f64>]) -> Result<Vec<f64>> {
        self.check(code)?;
        if seeds.len() != self.shapes.len() {
            return Err(LelsdError::ShapeMismatch(format!(
                "expected {} seed gradients, got {}",
                self.shapes.len(),
                seeds.len()
            )));
        }
        for (seed, &shape) in seeds.iter().zip(&self.shapes) {
            if seed.dim() != shape {
                return Err(LelsdError::ShapeMismatch(format!(
                    "seed gradient of shape {:?} for layer {:?}",
                    seed.dim(),
                    shape
                )));
            }
        }
        let z = code.values();
        let (hidden, image) = self.run(z);
        let mut grad = vec![0.0; PLANTED_LATENT_DIM];

        let (ic, ih, iw) = IMAGE;
        let (hc, hh, hw) = HIDDEN;
        let mut d_hidden = seeds[0].clone();
        for c in 0..ic {
            for i in 0..ih {
                for j in 0..iw {
                    let d_pre = seeds[1][[c, i, j]] * self.act_grad(image[[c, i, j]]);
                    if d_pre == 0.0 {
                        continue;
                    }
                    for d in 0..hc {
                        d_hidden[[d, i / 2, j / 2]] += self.mix[[c, d]] * d_pre;
                    }
                    let off = Self::offset(iw, j);
                    for k in 0..HALF_DIM {
                        grad[off + k] += self.skip[[c, i, j, k]] * d_pre;
                    }
                }
            }
        }
        for c in 0..hc {
            for i in 0..hh {
                for j in 0..hw {
                    let d_pre = d_hidden[[c, i, j]] * self.act_grad(hidden[[c, i, j]]);
                    let off = Self::offset(hw, j);
                    for k in 0..HALF_DIM {
                        grad[off + k] += self.w0[[c, i, j, k]] * d_pre;
                    }
                }
            }
        }
        Ok(grad)
    }
}
