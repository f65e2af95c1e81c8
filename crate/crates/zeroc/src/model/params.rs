use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Result, ZcError};

/// Named parameter registry backing an energy model: creation, deterministic
/// (re)initialization, save/load, and trainable-subset selection.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl ParamStore {
    pub fn new(device: Device, dtype: DType) -> Self {
        ParamStore {
            device,
            dtype,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Creates (zero-filled) or retrieves the named variable. Clones share
    /// storage with the registry entry.
    pub fn get(&self, name: &str, dims: &[usize]) -> Result<Var> {
        let mut vars = self.vars.borrow_mut();
        if let Some(v) = vars.get(name) {
            if v.dims() != dims {
                return Err(ZcError::Contract(format!(
                    "parameter {name} requested with shape {dims:?} but exists as {:?}",
                    v.dims()
                )));
            }
            return Ok(v.clone());
        }
        let var = Var::zeros(dims, self.dtype, &self.device)?;
        vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Deterministic initialization: He-scaled normals for weights, zeros for
    /// biases, unit normals for power-iteration and embedding vectors. The
    /// per-parameter stream is derived from (seed, name), so values do not
    /// depend on creation order.
    pub fn reseed(&self, seed: u64) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let mut h: u64 = 0xcbf29ce484222325;
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x100000001b3);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
            let dims = var.dims().to_vec();
            let count: usize = dims.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; count]
            } else {
                let std = if name.ends_with(".weight") {
                    let fan_in: usize = dims[1..].iter().product::<usize>().max(1);
                    (2.0 / fan_in as f64).sqrt()
                } else {
                    1.0
                };
                let dist = Normal::new(0.0, std).unwrap();
                (0..count).map(|_| dist.sample(&mut rng)).collect()
            };
            let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Parameters the optimizer should update (power-iteration state is not
    /// a learnable parameter).
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.vars
            .borrow()
            .iter()
            .filter(|(name, _)| !name.ends_with(".sn_u"))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let vars = self.vars.borrow();
        let map: std::collections::HashMap<String, Tensor> = vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads values into already-registered variables by name.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in self.vars.borrow().iter() {
            let t = map.get(name).ok_or_else(|| {
                ZcError::Contract(format!("checkpoint is missing parameter {name}"))
            })?;
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.vars
            .borrow()
            .values()
            .map(|v| v.dims().iter().product::<usize>())
            .sum()
    }
}
