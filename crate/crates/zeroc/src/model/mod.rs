//! Conditional energy networks: concept EBM E(x, m, c), relation EBM
//! E(x, m1, m2, r), and the label-embedding table.

mod embed;
mod net;
mod params;

use std::cell::Cell;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Result, ZcError};

pub use embed::LabelEmbeddingTable;
pub use net::{EnergyNet, EnergyNetConfig, SnConv2d};
pub use params::ParamStore;

/// A differentiable scalar energy over an image and a fixed set of mask
/// slots. Implemented by bound concept models, composed energies, and the
/// analytic stand-ins used for testing.
pub trait MaskEnergy {
    fn num_slots(&self) -> usize;
    /// `x`: (N, C, H, W); `masks`: one (N, 1, H, W) tensor per slot.
    /// Returns per-chain energies (N,).
    fn energy(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor>;
}

/// Scores a single mask against a concept label.
pub trait ConceptScorer {
    fn vocabulary(&self) -> Vec<String>;
    fn concept_energy_for(&self, x: &Tensor, m: &Tensor, label: &str) -> Result<Tensor>;
}

/// Scores an ordered mask pair against a relation label.
pub trait RelationScorer {
    fn vocabulary(&self) -> Vec<String>;
    fn relation_energy_for(&self, x: &Tensor, m1: &Tensor, m2: &Tensor, label: &str)
        -> Result<Tensor>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Concept,
    Relation,
}

impl ModelKind {
    pub fn mask_channels(self) -> usize {
        match self {
            ModelKind::Concept => 1,
            ModelKind::Relation => 2,
        }
    }
}

/// One trained energy model: network, parameters, and the label table.
pub struct EnergyModel {
    kind: ModelKind,
    config: EnergyNetConfig,
    net: EnergyNet,
    table: LabelEmbeddingTable,
    store: ParamStore,
    train_mode: Cell<bool>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    kind: ModelKind,
    config: EnergyNetConfig,
    vocabulary: Vec<String>,
    dtype: String,
}

impl EnergyModel {
    pub fn new(
        kind: ModelKind,
        config: EnergyNetConfig,
        vocabulary: &[String],
        dtype: DType,
        seed: u64,
    ) -> Result<Self> {
        if config.mask_channels != kind.mask_channels() {
            return Err(ZcError::Contract(format!(
                "{kind:?} model requires {} mask channel(s), config has {}",
                kind.mask_channels(),
                config.mask_channels
            )));
        }
        let store = ParamStore::new(Device::Cpu, dtype);
        let net = EnergyNet::new(&store, &config)?;
        let table_var = store.get("embeddings", &[vocabulary.len(), config.c_dim])?;
        store.reseed(seed)?;
        let table = LabelEmbeddingTable::from_var(vocabulary.to_vec(), table_var)?;
        Ok(EnergyModel {
            kind,
            config,
            net,
            table,
            store,
            train_mode: Cell::new(false),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &EnergyNetConfig {
        &self.config
    }

    pub fn table(&self) -> &LabelEmbeddingTable {
        &self.table
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn net(&self) -> &EnergyNet {
        &self.net
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn set_train(&self, train: bool) {
        self.train_mode.set(train);
    }

    /// E(x, m, c_embed) for a batch; differentiable w.r.t. x, m, and c_embed.
    pub fn concept_energy(&self, x: &Tensor, m: &Tensor, c_embed: &Tensor) -> Result<Tensor> {
        if self.kind != ModelKind::Concept {
            return Err(ZcError::Contract("not a concept model".into()));
        }
        self.net
            .forward(x, &[m.clone()], c_embed, self.train_mode.get())
    }

    /// E(x, m1, m2, r_embed); m1/m2 order matters for directed relations.
    pub fn relation_energy(
        &self,
        x: &Tensor,
        m1: &Tensor,
        m2: &Tensor,
        r_embed: &Tensor,
    ) -> Result<Tensor> {
        if self.kind != ModelKind::Relation {
            return Err(ZcError::Contract("not a relation model".into()));
        }
        self.net.forward(
            x,
            &[m1.clone(), m2.clone()],
            r_embed,
            self.train_mode.get(),
        )
    }

    pub fn embed_label(&self, label: &str) -> Result<Tensor> {
        self.table.embed(label)
    }

    fn embed_for_batch(&self, label: &str, x: &Tensor) -> Result<Tensor> {
        self.table.embed_batch(label, x.dims()[0])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = CheckpointMeta {
            format_version: 1,
            kind: self.kind,
            config: self.config.clone(),
            vocabulary: self.table.vocabulary().to_vec(),
            dtype: format!("{:?}", self.store.dtype()),
        };
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&meta)?)?;
        self.store.save(&dir.join("params.safetensors"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("model.json"))?)?;
        if meta.format_version != 1 {
            return Err(ZcError::Contract(format!(
                "unsupported checkpoint version {}",
                meta.format_version
            )));
        }
        let dtype = match meta.dtype.as_str() {
            "F32" => DType::F32,
            "F64" => DType::F64,
            other => return Err(ZcError::Contract(format!("unsupported dtype {other}"))),
        };
        let model = EnergyModel::new(meta.kind, meta.config, &meta.vocabulary, dtype, 0)?;
        model.store.load(&dir.join("params.safetensors"))?;
        Ok(model)
    }
}

impl ConceptScorer for EnergyModel {
    fn vocabulary(&self) -> Vec<String> {
        self.table.vocabulary().to_vec()
    }

    fn concept_energy_for(&self, x: &Tensor, m: &Tensor, label: &str) -> Result<Tensor> {
        let c = self.embed_for_batch(label, x)?;
        self.concept_energy(x, m, &c)
    }
}

impl RelationScorer for EnergyModel {
    fn vocabulary(&self) -> Vec<String> {
        self.table.vocabulary().to_vec()
    }

    fn relation_energy_for(
        &self,
        x: &Tensor,
        m1: &Tensor,
        m2: &Tensor,
        label: &str,
    ) -> Result<Tensor> {
        let r = self.embed_for_batch(label, x)?;
        self.relation_energy(x, m1, m2, &r)
    }
}

/// A concept model bound to one label: a 1-slot mask energy.
pub struct BoundConcept<'a> {
    pub model: &'a dyn ConceptScorer,
    pub label: String,
}

impl MaskEnergy for BoundConcept<'_> {
    fn num_slots(&self) -> usize {
        1
    }

    fn energy(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor> {
        if masks.len() != 1 {
            return Err(ZcError::Contract(format!(
                "bound concept expects 1 mask, got {}",
                masks.len()
            )));
        }
        self.model.concept_energy_for(x, &masks[0], &self.label)
    }
}

/// A relation model bound to one label: a 2-slot mask energy over an
/// ordered mask pair.
pub struct BoundRelation<'a> {
    pub model: &'a dyn RelationScorer,
    pub label: String,
}

impl MaskEnergy for BoundRelation<'_> {
    fn num_slots(&self) -> usize {
        2
    }

    fn energy(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor> {
        if masks.len() != 2 {
            return Err(ZcError::Contract(format!(
                "bound relation expects 2 masks, got {}",
                masks.len()
            )));
        }
        self.model
            .relation_energy_for(x, &masks[0], &masks[1], &self.label)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(kind: ModelKind) -> EnergyNetConfig {
        let mut cfg = EnergyNetConfig::new(4, kind.mask_channels(), 8, 8);
        cfg.c_dim = 6;
        cfg
    }

    fn tiny_model(kind: ModelKind, dtype: DType) -> EnergyModel {
        let vocab: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        EnergyModel::new(kind, tiny_config(kind), &vocab, dtype, 42).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Tensor {
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, dims, &Device::Cpu)
            .unwrap()
            .to_dtype(dtype)
            .unwrap()
    }

    #[test]
    fn energies_are_finite_and_deterministic() {
        let m = tiny_model(ModelKind::Concept, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 4, 8, 8], DType::F32);
        let mask = rand_tensor(&mut rng, &[2, 1, 8, 8], DType::F32);
        let e1 = m.concept_energy_for(&x, &mask, "a").unwrap();
        let e2 = m.concept_energy_for(&x, &mask, "a").unwrap();
        let v1 = e1.to_vec1::<f32>().unwrap();
        let v2 = e2.to_vec1::<f32>().unwrap();
        assert_eq!(v1, v2);
        assert!(v1.iter().all(|e| e.is_finite()));
    }

    #[test]
    fn batched_energy_matches_single_evaluation() {
        let m = tiny_model(ModelKind::Relation, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 4, 8, 8], DType::F64);
        let m1 = rand_tensor(&mut rng, &[3, 1, 8, 8], DType::F64);
        let m2 = rand_tensor(&mut rng, &[3, 1, 8, 8], DType::F64);
        let batch = m
            .relation_energy_for(&x, &m1, &m2, "b")
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for i in 0..3 {
            let xi = x.narrow(0, i, 1).unwrap();
            let m1i = m1.narrow(0, i, 1).unwrap();
            let m2i = m2.narrow(0, i, 1).unwrap();
            let ei = m
                .relation_energy_for(&xi, &m1i, &m2i, "b")
                .unwrap()
                .to_vec1::<f64>()
                .unwrap()[0];
            assert!(
                (ei - batch[i]).abs() <= 1e-9 * (1.0 + ei.abs()),
                "batch {} vs single {}",
                batch[i],
                ei
            );
        }
    }

    #[test]
    fn swapped_relation_masks_are_accepted() {
        let m = tiny_model(ModelKind::Relation, DType::F32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[1, 4, 8, 8], DType::F32);
        let m1 = rand_tensor(&mut rng, &[1, 1, 8, 8], DType::F32);
        let m2 = rand_tensor(&mut rng, &[1, 1, 8, 8], DType::F32);
        m.relation_energy_for(&x, &m1, &m2, "a").unwrap();
        m.relation_energy_for(&x, &m2, &m1, "a").unwrap();
    }

    /// Finite-difference oracle for input gradients.
    fn check_grad_fd(
        energy: impl Fn(&Tensor) -> Tensor,
        point: &Tensor,
        coords: &[usize],
        rel_tol: f64,
    ) {
        let var = Var::from_tensor(point).unwrap();
        let e = energy(var.as_tensor());
        let grads = e.backward().unwrap();
        let g = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let flat = point.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = point.dims().to_vec();
        let h = 1e-5;
        for &i in coords {
            let mut plus = flat.clone();
            plus[i] += h;
            let mut minus = flat.clone();
            minus[i] -= h;
            let tp = Tensor::from_vec(plus, dims.clone(), &Device::Cpu).unwrap();
            let tm = Tensor::from_vec(minus, dims.clone(), &Device::Cpu).unwrap();
            let ep = energy(&tp).to_scalar::<f64>().unwrap();
            let em = energy(&tm).to_scalar::<f64>().unwrap();
            let fd = (ep - em) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-6);
            assert!(
                (fd - g[i]).abs() / denom < rel_tol,
                "coord {i}: fd {fd} vs autodiff {}",
                g[i]
            );
        }
    }

    #[test]
    fn concept_energy_gradient_matches_finite_differences() {
        let m = tiny_model(ModelKind::Concept, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[1, 4, 8, 8], DType::F64);
        let mask = rand_tensor(&mut rng, &[1, 1, 8, 8], DType::F64);
        let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..64)).collect();
        check_grad_fd(
            |mt| m.concept_energy_for(&x, mt, "a").unwrap().sum_all().unwrap(),
            &mask,
            &coords,
            1e-3,
        );
        // Gradient w.r.t. the label embedding.
        let c = m.embed_label("a").unwrap().unsqueeze(0).unwrap();
        let coords: Vec<usize> = (0..6).collect();
        check_grad_fd(
            |ct| m.concept_energy(&x, &mask, ct).unwrap().sum_all().unwrap(),
            &c,
            &coords,
            1e-3,
        );
    }

    #[test]
    fn relation_energy_gradient_matches_finite_differences() {
        let m = tiny_model(ModelKind::Relation, DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[1, 4, 8, 8], DType::F64);
        let m1 = rand_tensor(&mut rng, &[1, 1, 8, 8], DType::F64);
        let m2 = rand_tensor(&mut rng, &[1, 1, 8, 8], DType::F64);
        let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..64)).collect();
        check_grad_fd(
            |mt| {
                m.relation_energy_for(&x, mt, &m2, "c")
                    .unwrap()
                    .sum_all()
                    .unwrap()
            },
            &m1,
            &coords,
            1e-3,
        );
    }

    #[test]
    fn normalized_convolutions_have_unit_spectral_norm() {
        let m = tiny_model(ModelKind::Concept, DType::F64);
        for conv in m.net().spectral_convs() {
            conv.power_iterate(100).unwrap();
            let s = conv.normalized_spectral_norm(60).unwrap();
            assert!(s <= 1.0 + 1e-2, "spectral norm {s} exceeds bound");
        }
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let m = tiny_model(ModelKind::Concept, DType::F32);
        let x = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let bad = Tensor::zeros((1, 1, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            m.concept_energy_for(&x, &bad, "a"),
            Err(ZcError::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_energies() {
        let m = tiny_model(ModelKind::Concept, DType::F32);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let loaded = EnergyModel::load(dir.path()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 4, 8, 8], DType::F32);
        let mask = rand_tensor(&mut rng, &[2, 1, 8, 8], DType::F32);
        let a = m.concept_energy_for(&x, &mask, "b").unwrap().to_vec1::<f32>().unwrap();
        let b = loaded
            .concept_energy_for(&x, &mask, "b")
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(a, b);
    }
}
