//! Toy dense single-stage detector head.
//!
//! A shared affine scorer per anchor slot reads a k x k feature window
//! around each cell and emits C class logits plus 4 box deltas for that
//! cell's anchors. No backbone, no nonlinearity: enough structure to
//! exercise dense-anchor loss mechanics while keeping forward/backward
//! exactly differentiable by hand.

use crate::error::{Error, Result};
use crate::scene::Scene;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const CHECKPOINT_MAGIC: &[u8; 8] = b"SADCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Classification biases start at the usual rare-foreground prior.
const FOREGROUND_PRIOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub classes: usize,
    pub anchor_slots: usize,
    pub window: usize,
    pub features: usize,
}

impl ModelDims {
    pub fn outputs_per_slot(&self) -> usize {
        self.classes + 4
    }

    pub fn window_len(&self) -> usize {
        self.window * self.window * self.features
    }

    pub fn weights_per_output(&self) -> usize {
        self.window_len() + 1 // + bias
    }

    pub fn param_count(&self) -> usize {
        self.anchor_slots * self.outputs_per_slot() * self.weights_per_output()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.anchor_slots == 0 || self.features == 0 {
            return Err(Error::config("model dims must be positive"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config("model window must be odd"));
        }
        Ok(())
    }
}

/// Dense per-anchor outputs for one scene, anchor-major:
/// `logits[anchor * C + class]`, `deltas[anchor * 4 + component]`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<f64>,
    pub anchors: usize,
}

#[derive(Debug, Clone)]
pub struct DenseModel {
    pub dims: ModelDims,
    pub params: Vec<f64>,
}

impl DenseModel {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        Ok(DenseModel {
            params: vec![0.0; dims.param_count()],
            dims,
        })
    }

    /// Seeded initialization: small Gaussian weights, classification biases
    /// at the foreground prior, box biases at zero.
    pub fn init_seeded(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let mut params = vec![0.0; dims.param_count()];
        let wpo = dims.weights_per_output();
        let cls_bias = -((1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
        for slot in 0..dims.anchor_slots {
            for out in 0..dims.outputs_per_slot() {
                let base = (slot * dims.outputs_per_slot() + out) * wpo;
                for j in 0..wpo - 1 {
                    params[base + j] = normal.sample(&mut rng);
                }
                params[base + wpo - 1] = if out < dims.classes { cls_bias } else { 0.0 };
            }
        }
        Ok(DenseModel { dims, params })
    }

    pub fn check_scene(&self, scene: &Scene) -> Result<()> {
        if scene.f != self.dims.features {
            return Err(Error::invalid(format!(
                "scene {} has {} features, model expects {}",
                scene.scene_id, scene.f, self.dims.features
            )));
        }
        Ok(())
    }

    pub fn anchors_for(&self, scene: &Scene) -> usize {
        scene.h * scene.w * self.dims.anchor_slots
    }

    fn gather_window(&self, scene: &Scene, y: usize, x: usize, buf: &mut [f64]) {
        let k = self.dims.window;
        let r = (k / 2) as isize;
        let f = self.dims.features;
        let mut idx = 0;
        for dy in -r..=r {
            let yy = y as isize + dy;
            for dx in -r..=r {
                let xx = x as isize + dx;
                if yy < 0 || xx < 0 || yy >= scene.h as isize || xx >= scene.w as isize {
                    buf[idx..idx + f].fill(0.0);
                } else {
                    let base = (yy as usize * scene.w + xx as usize) * f;
                    buf[idx..idx + f].copy_from_slice(&scene.grid[base..base + f]);
                }
                idx += f;
            }
        }
    }

    pub fn forward(&self, scene: &Scene) -> Result<ModelOutput> {
        self.check_scene(scene)?;
        let dims = &self.dims;
        let n = self.anchors_for(scene);
        let mut logits = vec![0.0; n * dims.classes];
        let mut deltas = vec![0.0; n * 4];
        let wl = dims.window_len();
        let wpo = dims.weights_per_output();
        let mut window = vec![0.0; wl];
        for y in 0..scene.h {
            for x in 0..scene.w {
                self.gather_window(scene, y, x, &mut window);
                let cell = y * scene.w + x;
                for slot in 0..dims.anchor_slots {
                    let anchor = cell * dims.anchor_slots + slot;
                    for out in 0..dims.outputs_per_slot() {
                        let base = (slot * dims.outputs_per_slot() + out) * wpo;
                        let weights = &self.params[base..base + wl];
                        let mut acc = self.params[base + wl];
                        for (w, v) in weights.iter().zip(&window) {
                            acc += w * v;
                        }
                        if out < dims.classes {
                            logits[anchor * dims.classes + out] = acc;
                        } else {
                            deltas[anchor * 4 + (out - dims.classes)] = acc;
                        }
                    }
                }
            }
        }
        if logits.iter().chain(deltas.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "model produced non-finite outputs on scene {}",
                scene.scene_id
            )));
        }
        Ok(ModelOutput {
            logits,
            deltas,
            anchors: n,
        })
    }

    /// Accumulate `d(loss)/d(params)` into `grad` given the loss gradients
    /// with respect to every logit and delta of this scene.
    pub fn backward_into(
        &self,
        scene: &Scene,
        dlogits: &[f64],
        ddeltas: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        self.check_scene(scene)?;
        let dims = &self.dims;
        let n = self.anchors_for(scene);
        if dlogits.len() != n * dims.classes || ddeltas.len() != n * 4 {
            return Err(Error::invalid("gradient buffers do not match scene shape"));
        }
        if grad.len() != self.params.len() {
            return Err(Error::invalid("parameter gradient buffer length mismatch"));
        }
        let wl = dims.window_len();
        let wpo = dims.weights_per_output();
        let mut window = vec![0.0; wl];
        for y in 0..scene.h {
            for x in 0..scene.w {
                self.gather_window(scene, y, x, &mut window);
                let cell = y * scene.w + x;
                for slot in 0..dims.anchor_slots {
                    let anchor = cell * dims.anchor_slots + slot;
                    for out in 0..dims.outputs_per_slot() {
                        let g = if out < dims.classes {
                            dlogits[anchor * dims.classes + out]
                        } else {
                            ddeltas[anchor * 4 + (out - dims.classes)]
                        };
                        if g == 0.0 {
                            continue;
                        }
                        let base = (slot * dims.outputs_per_slot() + out) * wpo;
                        let gslice = &mut grad[base..base + wl];
                        for (gw, v) in gslice.iter_mut().zip(&window) {
                            *gw += g * v;
                        }
                        grad[base + wl] += g;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Versioned flat-binary checkpoint: header (magic, version, C, A, k, F,
/// parameter count), anchor scales, the config hash of the producing run,
/// then parameters as little-endian f64.
pub fn save_checkpoint(
    path: &Path,
    model: &DenseModel,
    anchor_scales: &[f64],
    config_hash: &[u8; 32],
) -> Result<()> {
    if anchor_scales.len() != model.dims.anchor_slots {
        return Err(Error::invalid(format!(
            "{} anchor scales for {} slots",
            anchor_scales.len(),
            model.dims.anchor_slots
        )));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        model.dims.classes,
        model.dims.anchor_slots,
        model.dims.window,
        model.dims.features,
    ] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    for s in anchor_scales {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(config_hash)?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub model: DenseModel,
    pub anchor_scales: Vec<f64>,
    pub config_hash: [u8; 32],
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut field = || -> Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    };
    let classes = field()?;
    let anchor_slots = field()?;
    let window = field()?;
    let features = field()?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let param_count = u64::from_le_bytes(u64buf) as usize;
    let dims = ModelDims {
        classes,
        anchor_slots,
        window,
        features,
    };
    dims.validate()
        .map_err(|e| Error::format(format!("checkpoint dims: {e}")))?;
    if param_count != dims.param_count() {
        return Err(Error::format(format!(
            "checkpoint stores {param_count} parameters, dims imply {}",
            dims.param_count()
        )));
    }
    let mut f64buf = [0u8; 8];
    let mut anchor_scales = Vec::with_capacity(anchor_slots);
    for _ in 0..anchor_slots {
        r.read_exact(&mut f64buf)?;
        anchor_scales.push(f64::from_le_bytes(f64buf));
    }
    let mut config_hash = [0u8; 32];
    r.read_exact(&mut config_hash)?;
    let mut params = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        r.read_exact(&mut f64buf)?;
        params.push(f64::from_le_bytes(f64buf));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::format("checkpoint contains non-finite parameters"));
    }
    Ok(Checkpoint {
        model: DenseModel { dims, params },
        anchor_scales,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorConfig};

    fn dims() -> ModelDims {
        ModelDims {
            classes: 3,
            anchor_slots: 3,
            window: 3,
            features: 6,
        }
    }

    fn test_scene(seed: u64) -> Scene {
        generate_scene(&GeneratorConfig::default(), seed, format!("m{seed}")).unwrap()
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let model = DenseModel::zeros(dims()).unwrap();
        let scene = test_scene(1);
        let out = model.forward(&scene).unwrap();
        assert_eq!(out.anchors, 12 * 12 * 3);
        assert!(out.logits.iter().all(|v| *v == 0.0));
        assert!(out.deltas.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = DenseModel::init_seeded(dims(), 5).unwrap();
        let scene = test_scene(2);
        let a = model.forward(&scene).unwrap();
        let b = model.forward(&scene).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.deltas, b.deltas);
    }

    #[test]
    fn feature_mismatch_rejected() {
        let model = DenseModel::init_seeded(
            ModelDims {
                features: 8,
                ..dims()
            },
            5,
        )
        .unwrap();
        assert!(model.forward(&test_scene(1)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        use crate::gradcheck::fd_gradient;
        use rand::Rng;
        use rand::SeedableRng;

        let d = dims();
        let mut model = DenseModel::init_seeded(d, 11).unwrap();
        let scene = test_scene(3);
        let n = model.anchors_for(&scene);

        // arbitrary fixed cotangents make the scalar loss generic
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let dlogits: Vec<f64> = (0..n * d.classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ddeltas: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut grad = vec![0.0; model.params.len()];
        model
            .backward_into(&scene, &dlogits, &ddeltas, &mut grad)
            .unwrap();

        let loss_of = |m: &DenseModel| {
            let out = m.forward(&scene).unwrap();
            out.logits
                .iter()
                .zip(&dlogits)
                .chain(out.deltas.iter().zip(&ddeltas))
                .map(|(v, g)| v * g)
                .sum::<f64>()
        };
        for _ in 0..20 {
            let pi = rng.gen_range(0..model.params.len());
            let orig = model.params[pi];
            let fd = fd_gradient(
                |x| {
                    let mut m = model.clone();
                    m.params[pi] = x;
                    loss_of(&m)
                },
                orig,
                1e-5,
            )
            .unwrap();
            let rel = (grad[pi] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-5, "param {pi}: analytic {} vs fd {fd}", grad[pi]);
            model.params[pi] = orig;
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = DenseModel::init_seeded(dims(), 21).unwrap();
        let scales = [2.0, 3.0, 4.5];
        let hash = [7u8; 32];
        save_checkpoint(&path, &model, &scales, &hash).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.dims, model.dims);
        assert_eq!(loaded.model.params, model.params);
        assert_eq!(loaded.anchor_scales, scales);
        assert_eq!(loaded.config_hash, hash);
    }
}
