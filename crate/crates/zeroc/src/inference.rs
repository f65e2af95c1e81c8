//! The four inference tasks over mask energies: detection, classification,
//! parsing an image into a concept graph, and cross-domain acquisition.
//!
//! Everything here is generic over [`MaskEnergy`] / the scorer traits, so
//! the same code runs against trained networks and against the analytic
//! pixel-overlap energies in [`analytic`] that the test suite uses to pin
//! down expected outputs.

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::composer::{compose, ComposedEnergyBound, ConceptGraph, Edge};
use crate::model::{ConceptScorer, MaskEnergy, RelationScorer};
use crate::sampler::{init_uniform, sgld, SgldConfig};
use crate::{Result, ZcError};

/// Ensemble detection settings. `ensemble` independent SGLD chains are run
/// jointly (batched) and the lowest-energy chain wins.
#[derive(Clone, Debug)]
pub struct DetectConfig {
    pub ensemble: usize,
    pub sgld: SgldConfig,
}

impl DetectConfig {
    fn with_ensemble(ensemble: usize) -> Self {
        let mut sgld = SgldConfig::for_masks(150);
        sgld.polish_steps = 15;
        DetectConfig { ensemble, sgld }
    }

    /// Detection default: 256 chains.
    pub fn for_detection() -> Self {
        DetectConfig::with_ensemble(256)
    }

    /// MAP-classification default: 64 chains per candidate.
    pub fn for_classification() -> Self {
        DetectConfig::with_ensemble(64)
    }
}

/// Best chain of a detection ensemble.
#[derive(Debug)]
pub struct DetectionResult {
    /// One (1, 1, H, W) mask per slot of the energy, from the best chain.
    pub masks: Vec<Tensor>,
    pub best_energy: f64,
    /// Final energy of every chain; `best_energy` is the minimum.
    pub energies: Vec<f64>,
}

impl DetectionResult {
    /// Pixelwise maximum of the slot masks — the reported detection for a
    /// composed energy.
    pub fn union_mask(&self) -> Result<Tensor> {
        crate::composer::combine_masks(&self.masks)
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

fn batch_image(x: &Tensor, n: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    Ok(x.unsqueeze(0)?.expand((n, c, h, w))?.contiguous()?)
}

/// Minimize `energy` over its mask slots with an SGLD ensemble and return
/// the lowest-energy chain.
pub fn detect(
    energy: &dyn MaskEnergy,
    x: &Tensor,
    config: &DetectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DetectionResult> {
    if config.ensemble == 0 {
        return Err(ZcError::Contract("detection ensemble must be >= 1".into()));
    }
    let (_, h, w) = x.dims3()?;
    let n = config.ensemble;
    let xb = batch_image(x, n)?;
    let init: Vec<Tensor> = (0..energy.num_slots())
        .map(|_| init_uniform(&[n, 1, h, w], x.dtype(), x.device(), rng))
        .collect::<Result<_>>()?;
    let out = sgld(
        |states| energy.energy(&xb, states),
        &init,
        &config.sgld,
        rng,
    )?;
    let best = argmin(&out.energies);
    let masks = out
        .states
        .iter()
        .map(|s| Ok(s.narrow(0, best, 1)?))
        .collect::<Result<_>>()?;
    Ok(DetectionResult {
        masks,
        best_energy: out.energies[best],
        energies: out.energies,
    })
}

/// Numerically stable softmax over negated energies: the MAP readout
/// p_c = exp(-E_c) / Σ exp(-E_c').
pub fn softmax_readout(energies: &[f64]) -> Vec<f64> {
    let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let ws: Vec<f64> = energies.iter().map(|e| (-(e - lo)).exp()).collect();
    let z: f64 = ws.iter().sum();
    ws.iter().map(|w| w / z).collect()
}

#[derive(Debug)]
pub struct ClassificationResult {
    pub labels: Vec<String>,
    /// Min-ensemble energy per candidate.
    pub energies: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// Index of the argmax-probability (= argmin-energy) candidate.
    pub best: usize,
}

/// Classify `x` among candidate energies: detect under each candidate and
/// read the min-ensemble energies out through a softmax.
pub fn classify(
    candidates: &[(String, &dyn MaskEnergy)],
    x: &Tensor,
    config: &DetectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassificationResult> {
    if candidates.len() < 2 {
        return Err(ZcError::Contract(
            "classification needs at least two candidates".into(),
        ));
    }
    let mut labels = Vec::new();
    let mut energies = Vec::new();
    for (label, energy) in candidates {
        labels.push(label.clone());
        energies.push(detect(*energy, x, config, rng)?.best_energy);
    }
    let probabilities = softmax_readout(&energies);
    let best = argmin(&energies);
    Ok(ClassificationResult {
        labels,
        energies,
        probabilities,
        best,
    })
}

/// Pick which of several images best fits one energy — the detection-style
/// readout used for transferred concepts.
pub fn classify_images(
    energy: &dyn MaskEnergy,
    images: &[Tensor],
    config: &DetectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClassificationResult> {
    if images.len() < 2 {
        return Err(ZcError::Contract(
            "image classification needs at least two images".into(),
        ));
    }
    let mut energies = Vec::new();
    for x in images {
        energies.push(detect(energy, x, config, rng)?.best_energy);
    }
    let probabilities = softmax_readout(&energies);
    let best = argmin(&energies);
    Ok(ClassificationResult {
        labels: (0..images.len()).map(|i| i.to_string()).collect(),
        energies,
        probabilities,
        best,
    })
}

/// Σ over pixels of max(0, Σ_masks m(p) − 1). Masks of rank >= 3 are
/// treated as batched at dim 0 and reduced per chain; lower ranks reduce to
/// a single value.
pub fn overlap_energy(masks: &[Tensor]) -> Result<Tensor> {
    if masks.is_empty() {
        return Err(ZcError::Contract("overlap of zero masks".into()));
    }
    let mut sum = masks[0].clone();
    for m in &masks[1..] {
        sum = (sum + m)?;
    }
    let over = (sum - 1.0)?.relu()?;
    if over.rank() >= 3 {
        let n = over.dims()[0];
        Ok(over.reshape((n, ()))?.sum(D::Minus1)?)
    } else {
        Ok(over.sum_all()?.unsqueeze(0)?)
    }
}

/// Settings for parsing an image into a concept graph.
#[derive(Clone, Debug)]
pub struct ParseConfig {
    /// Mask slots allocated per concept label (N_i, uniform).
    pub max_instances: usize,
    /// Weight of the mask-overlap penalty in the parsing energy.
    pub overlap_weight: f64,
    /// Masks with mean activation below this are removed as empty.
    pub empty_threshold: f64,
    pub sgld: SgldConfig,
    /// Joint SGLD restarts; the lowest-energy parse wins.
    pub restarts: usize,
}

impl Default for ParseConfig {
    fn default() -> Self {
        let mut sgld = SgldConfig::for_masks(150);
        sgld.polish_steps = 15;
        ParseConfig {
            max_instances: 4,
            overlap_weight: 1.0,
            empty_threshold: 0.05,
            sgld,
            restarts: 3,
        }
    }
}

impl ParseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_instances == 0 {
            return Err(ZcError::Contract("max_instances must be >= 1".into()));
        }
        if self.overlap_weight < 0.0 {
            return Err(ZcError::Contract("overlap_weight must be >= 0".into()));
        }
        if !(0.0 < self.empty_threshold && self.empty_threshold < 1.0) {
            return Err(ZcError::Contract(
                "empty_threshold must be in (0, 1)".into(),
            ));
        }
        if self.restarts == 0 {
            return Err(ZcError::Contract("restarts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Invert composition: recover the concept graph explaining an image.
///
/// Allocates `max_instances` mask slots per concept label, minimizes the
/// summed concept energy plus the weighted overlap penalty jointly over all
/// slots, drops empty masks, then classifies the relation for every
/// surviving pair by evaluating the relation model at both argument orders
/// over its vocabulary and keeping the global argmin.
pub fn parse(
    x: &Tensor,
    concepts: &dyn ConceptScorer,
    relations: &dyn RelationScorer,
    config: &ParseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ConceptGraph> {
    config.validate()?;
    let vocab = concepts.vocabulary();
    if vocab.is_empty() {
        return Err(ZcError::Contract("empty concept vocabulary".into()));
    }
    let (_, h, w) = x.dims3()?;
    let slot_labels: Vec<String> = vocab
        .iter()
        .flat_map(|l| std::iter::repeat(l.clone()).take(config.max_instances))
        .collect();

    // One restart per chain: the batched SGLD energy is chain-separable, so
    // restarts evolve independently and the argmin row is the best parse.
    //
    // Slots start as random solid patches rather than uniform noise. A
    // uniform mask is equidistant from every object up to a term in the
    // object's size, so all slots would descend on the same object and
    // fight; patch starts give each restart a different slot-to-object
    // assignment to relax from.
    let r = config.restarts;
    let xb = batch_image(x, r)?;
    let occupancy = occupancy_map(x)?;
    let init: Vec<Tensor> = (0..slot_labels.len())
        .map(|_| init_patches(&occupancy, r, h, w, x.dtype(), x.device(), rng))
        .collect::<Result<_>>()?;
    let energy = |states: &[Tensor]| -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for (m, label) in states.iter().zip(&slot_labels) {
            let e = concepts.concept_energy_for(&xb, m, label)?;
            total = Some(match total {
                Some(t) => (t + e)?,
                None => e,
            });
        }
        let penalty = (overlap_energy(states)? * config.overlap_weight)?;
        Ok((total.unwrap() + penalty.to_dtype(x.dtype())?)?)
    };
    let out = sgld(energy, &init, &config.sgld, rng)?;
    let best = argmin(&out.energies);

    let mut survivors: Vec<(String, Tensor)> = Vec::new();
    for (state, label) in out.states.iter().zip(&slot_labels) {
        let m = state.narrow(0, best, 1)?;
        let mean = m.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if mean >= config.empty_threshold {
            survivors.push((label.clone(), m));
        }
    }
    if survivors.is_empty() {
        return Err(ZcError::Parse(
            "no mask survived empty-mask removal".into(),
        ));
    }

    let rel_vocab = relations.vocabulary();
    let x2 = batch_image(x, 2)?;
    let mut edges = Vec::new();
    for i in 0..survivors.len() {
        for j in i + 1..survivors.len() {
            let (mi, mj) = (&survivors[i].1, &survivors[j].1);
            // Both argument orders in one batched evaluation per label.
            let m1 = Tensor::cat(&[mi, mj], 0)?;
            let m2 = Tensor::cat(&[mj, mi], 0)?;
            let mut best: Option<(f64, &str, bool)> = None;
            for label in &rel_vocab {
                let e = relations
                    .relation_energy_for(&x2, &m1, &m2, label)?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?;
                for (flipped, &v) in e.iter().enumerate().map(|(k, v)| (k == 1, v)) {
                    if best.map_or(true, |(b, _, _)| v < b) {
                        best = Some((v, label, flipped));
                    }
                }
            }
            let (_, label, flipped) = best.ok_or_else(|| {
                ZcError::Contract("empty relation vocabulary".into())
            })?;
            let (src, dst) = if flipped { (j, i) } else { (i, j) };
            edges.push(Edge::new(src, dst, label));
        }
    }
    let nodes = survivors.into_iter().map(|(l, _)| l).collect();
    Ok(ConceptGraph::new(nodes, edges)?.canonicalize())
}

/// One random solid rectangle per chain row, used to seed parse slots.
fn init_patches(
    rows: usize,
    h: usize,
    w: usize,
    dtype: DType,
    device: &candle_core::Device,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    use rand::Rng;
    let mut data = vec![0f32; rows * h * w];
    for row in 0..rows {
        // Thin bar patches matching the aspect of strokes, with an
        // occasional hollow ring so large outline-shaped objects also get
        // a nearby starting point in some restart.
        let ring = rng.gen_bool(0.25) && h >= 5 && w >= 5;
        let (ph, pw) = if ring {
            (rng.gen_range(4..=h.min(12)), rng.gen_range(4..=w.min(12)))
        } else if rng.gen_bool(0.5) {
            (rng.gen_range(1..=2usize), rng.gen_range(2..=(w / 2).max(2)))
        } else {
            (rng.gen_range(2..=(h / 2).max(2)), rng.gen_range(1..=2usize))
        };
        let ph = ph.min(h);
        let pw = pw.min(w);
        let r0 = rng.gen_range(0..=h - ph);
        let c0 = rng.gen_range(0..=w - pw);
        for r in r0..r0 + ph {
            for c in c0..c0 + pw {
                let border = r == r0 || r == r0 + ph - 1 || c == c0 || c == c0 + pw - 1;
                if border || !ring {
                    data[row * h * w + r * w + c] = 1.0;
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (rows, 1, h, w), device)?.to_dtype(dtype)?)
}

/// A concept carried across domains: the parsed graph, the text message
/// actually transmitted, and the energy recomposed from the receiver's
/// models.
pub struct Acquired<'a> {
    pub graph: ConceptGraph,
    pub message: String,
    pub energy: ComposedEnergyBound<'a>,
}

fn leaf_labels(g: &ConceptGraph, out: &mut std::collections::BTreeSet<String>) {
    for (i, label) in g.nodes.iter().enumerate() {
        match g.child(i) {
            Some(c) => leaf_labels(c, out),
            None => {
                out.insert(label.clone());
            }
        }
    }
}

/// Parse a concept out of a domain-1 image and rebuild it from the
/// receiving side's models: graphs move between domains as canonical text,
/// with shared label vocabularies as the only channel.
pub fn acquire<'a>(
    x1: &Tensor,
    concepts1: &dyn ConceptScorer,
    relations1: &dyn RelationScorer,
    config: &ParseConfig,
    concepts2: &'a dyn ConceptScorer,
    relations2: &'a dyn RelationScorer,
    rng: &mut ChaCha8Rng,
) -> Result<Acquired<'a>> {
    let graph = parse(x1, concepts1, relations1, config, rng)?;
    let message = graph.to_canonical_text();
    let received = ConceptGraph::from_canonical_text(&message)?;

    let mut needed = std::collections::BTreeSet::new();
    leaf_labels(&received, &mut needed);
    let have: std::collections::BTreeSet<String> =
        concepts2.vocabulary().into_iter().collect();
    if let Some(missing) = needed.difference(&have).next() {
        return Err(ZcError::Channel(format!(
            "receiver has no concept model for `{missing}`"
        )));
    }
    let rel_have: std::collections::BTreeSet<String> =
        relations2.vocabulary().into_iter().collect();
    if let Some(e) = received.edges.iter().find(|e| !rel_have.contains(&e.label)) {
        return Err(ZcError::Channel(format!(
            "receiver has no relation model for `{}`",
            e.label
        )));
    }
    let energy = compose(&received, concepts2, relations2)?;
    Ok(Acquired {
        graph: received,
        message,
        energy,
    })
}

pub mod analytic {
    //! Hand-crafted energies with known minima, built from the corpus'
    //! geometric oracles. A concept energy scores a mask by its squared
    //! pixel distance to the closest matching object actually present in
    //! the image; a relation energy is 0/1 by the exact predicate on the
    //! binarized masks. Inference over these has a forced outcome, which is
    //! what makes them useful as test fixtures.
    //!
    //! A concept energy is d + c·sqrt(ε + d) where d = Σ_p |m_p − g_p| for
    //! the closest candidate g. The linear part gives a constant descent
    //! drive everywhere; the strictly concave part makes one slot covering
    //! an object fully cheaper than any soft split of the object across
    //! slots, so joint minimization lands on one-slot-per-object states
    //! instead of the shared plateaus a plain quadratic distance admits.
    //! Both kinds of energy are shifted so a perfect match scores a small
    //! negative constant, which breaks template-classification ties in
    //! favor of the richest fully-satisfied graph.

    use std::cell::RefCell;
    use std::collections::{BTreeSet, HashMap};
    use std::rc::Rc;

    use candle_core::{DType, Tensor, D};

    use crate::corpus::{
        grid_from_image, mask_to_tensor, rectangle_at, verify_relation, Grid, ObjectSpec,
    };
    use crate::model::{ConceptScorer, RelationScorer};
    use crate::{Result, ZcError};

    /// Reward per satisfied term (matched concept node or holding
    /// relation). Letter graphs embed into one another — an F is a subgraph
    /// of an E — so with zero-energy perfect fits, template classification
    /// would tie; the bonus makes the richest fully-satisfied template the
    /// strict minimizer, while a single violated relation still dominates.
    const MATCH_BONUS: f64 = 2.0;
    /// Energy of a violated relation; sits well above the sampler's
    /// residual noise on the concept terms.
    const MISS_PENALTY: f64 = 10.0;

    /// Everything that depends only on the scene, shared across SGLD steps
    /// and chains: the plausible object bindings, their mask tensors, and
    /// (lazily) the object pairs satisfying each relation.
    struct SceneCache {
        objects: Vec<ObjectSpec>,
        /// One (1, 1, H, W) target mask per object, at image resolution.
        targets: Vec<Tensor>,
        target_vals: Vec<Vec<f64>>,
        /// Smoothed distance from the all-zero mask to each target — the
        /// size-dependent part of the distance, subtracted when ranking
        /// candidates so large objects attract masks as readily as small
        /// ones.
        target_base: Vec<f64>,
        pairs: RefCell<HashMap<String, Rc<Vec<(usize, usize)>>>>,
    }

    impl SceneCache {
        fn build(grid: &Grid, domain: u8) -> Result<SceneCache> {
            let objects = scene_objects(grid);
            let mut targets = Vec::with_capacity(objects.len());
            let mut target_vals = Vec::with_capacity(objects.len());
            let mut target_base = Vec::with_capacity(objects.len());
            for o in &objects {
                let t = mask_to_tensor(&o.pixels, grid.height, grid.width, domain)?
                    .unsqueeze(0)?;
                let tv = row_values(&t)?;
                target_base.push(smooth_l1_f64(&vec![0.0; tv.len()], &tv));
                target_vals.push(tv);
                targets.push(t);
            }
            Ok(SceneCache {
                objects,
                targets,
                target_vals,
                target_base,
                pairs: RefCell::new(HashMap::new()),
            })
        }

        /// Indices of objects a concept label could bind to.
        fn concept_candidates(&self, label: &str) -> Vec<usize> {
            self.objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.kind == label)
                .map(|(i, _)| i)
                .collect()
        }

        /// Ordered object pairs for which the relation predicate holds.
        fn satisfying_pairs(&self, label: &str) -> Result<Rc<Vec<(usize, usize)>>> {
            if let Some(p) = self.pairs.borrow().get(label) {
                return Ok(p.clone());
            }
            let mut out = Vec::new();
            for (ai, a) in self.objects.iter().enumerate() {
                for (bi, b) in self.objects.iter().enumerate() {
                    if ai != bi && verify_relation(a, b, label)? {
                        out.push((ai, bi));
                    }
                }
            }
            let out = Rc::new(out);
            self.pairs.borrow_mut().insert(label.into(), out.clone());
            Ok(out)
        }
    }

    /// Analytic stand-in for a trained model pair in one domain.
    pub struct AnalyticModels {
        pub domain: u8,
        pub concept_vocab: Vec<String>,
        pub relation_vocab: Vec<String>,
        cache: RefCell<HashMap<Vec<u8>, Rc<SceneCache>>>,
    }

    impl AnalyticModels {
        pub fn new(domain: u8, concepts: &[&str], relations: &[&str]) -> Self {
            AnalyticModels {
                domain,
                concept_vocab: concepts.iter().map(|s| s.to_string()).collect(),
                relation_vocab: relations.iter().map(|s| s.to_string()).collect(),
                cache: RefCell::new(HashMap::new()),
            }
        }

        fn scene(&self, grid: &Grid) -> Result<Rc<SceneCache>> {
            let mut key = Vec::with_capacity(grid.height * grid.width);
            for r in 0..grid.height {
                for c in 0..grid.width {
                    key.push(grid.get(r, c));
                }
            }
            if let Some(s) = self.cache.borrow().get(&key) {
                return Ok(s.clone());
            }
            let s = Rc::new(SceneCache::build(grid, self.domain)?);
            self.cache.borrow_mut().insert(key, s.clone());
            Ok(s)
        }
    }

    /// Group a grid's non-background cells by color.
    fn color_groups(grid: &Grid) -> Vec<(u8, BTreeSet<(usize, usize)>)> {
        let mut groups: std::collections::BTreeMap<u8, BTreeSet<(usize, usize)>> =
            Default::default();
        for r in 0..grid.height {
            for c in 0..grid.width {
                let color = grid.get(r, c);
                if color != 0 {
                    groups.entry(color).or_default().insert((r, c));
                }
            }
        }
        groups.into_iter().collect()
    }

    fn blob(color: u8, pixels: BTreeSet<(usize, usize)>) -> ObjectSpec {
        let bbox = ObjectSpec::tight_bbox(&pixels);
        ObjectSpec {
            kind: "blob".into(),
            color,
            orientation: 0,
            bbox,
            pixels,
        }
    }

    /// Maximal horizontal and vertical runs of `pixels`, plus the variants
    /// with an endpoint trimmed off wherever that endpoint also sits on a
    /// perpendicular run. A letter stroke shares its corner pixel with the
    /// spine it abuts, so the stroke as drawn is the maximal run minus
    /// that shared corner; enumerating exactly these sub-runs lets a mask
    /// bind to the real stroke without opening up arbitrary short
    /// fragments as spurious binding sites.
    fn line_runs(pixels: &BTreeSet<(usize, usize)>) -> Vec<BTreeSet<(usize, usize)>> {
        let mut out: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
        let mut add = |run: &[(usize, usize)], horizontal: bool| {
            let shared = |p: (usize, usize)| {
                let (r, c) = p;
                if horizontal {
                    (r > 0 && pixels.contains(&(r - 1, c))) || pixels.contains(&(r + 1, c))
                } else {
                    (c > 0 && pixels.contains(&(r, c - 1))) || pixels.contains(&(r, c + 1))
                }
            };
            let lo_max = shared(run[0]) as usize;
            let hi_max = shared(run[run.len() - 1]) as usize;
            for lo in 0..=lo_max {
                for hi in 0..=hi_max {
                    if run.len() >= 2 + lo + hi {
                        out.insert(run[lo..run.len() - hi].to_vec());
                    }
                }
            }
        };
        for &(r, c) in pixels {
            if c == 0 || !pixels.contains(&(r, c - 1)) {
                let mut run = vec![(r, c)];
                while pixels.contains(&(r, c + run.len())) {
                    run.push((r, c + run.len()));
                }
                add(&run, true);
            }
            if r == 0 || !pixels.contains(&(r - 1, c)) {
                let mut run = vec![(r, c)];
                while pixels.contains(&(r + run.len(), c)) {
                    run.push((r + run.len(), c));
                }
                add(&run, false);
            }
        }
        out.into_iter().map(|v| v.into_iter().collect()).collect()
    }

    /// Binarize one (1, sH, sW) mask back to grid cells: a cell is set when
    /// its block's mean activation exceeds 0.5.
    pub fn pixels_from_mask(m: &Tensor, scale: usize) -> Result<BTreeSet<(usize, usize)>> {
        let dims = m.dims();
        let (hs, ws) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let data = m.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let (h, w) = (hs / scale, ws / scale);
        let mut out = BTreeSet::new();
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0f32;
                for dr in 0..scale {
                    for dc in 0..scale {
                        sum += data[(r * scale + dr) * ws + c * scale + dc];
                    }
                }
                if sum / (scale * scale) as f32 > 0.5 {
                    out.insert((r, c));
                }
            }
        }
        Ok(out)
    }

    /// Classify a pixel set geometrically so the relation oracles can see
    /// it as the object it draws.
    pub fn object_from_pixels(pixels: &BTreeSet<(usize, usize)>) -> ObjectSpec {
        let mut o = blob(1, pixels.clone());
        let (r0, c0, h, w) = o.bbox;
        let n = pixels.len();
        if h == 1 && w == n && n >= 2 {
            o.kind = "line".into();
            o.orientation = 0;
        } else if w == 1 && h == n && n >= 2 {
            o.kind = "line".into();
            o.orientation = 1;
        } else if h >= 3 && w >= 3 {
            if let Ok(rect) = rectangle_at(r0, c0, h, w, 1) {
                if rect.pixels == *pixels {
                    o.kind = "rectangle".into();
                }
            }
            if o.kind != "rectangle" {
                if let Ok(e) = crate::corpus::eshape_at(r0, c0, h, w, 1) {
                    if e.spec.pixels == *pixels {
                        o.kind = "Eshape".into();
                    }
                }
            }
        }
        o
    }

    /// All plausible object bindings in a scene: every color blob as a
    /// whole, plus every line run within it.
    fn scene_objects(grid: &Grid) -> Vec<ObjectSpec> {
        let mut seen: BTreeSet<BTreeSet<(usize, usize)>> = BTreeSet::new();
        let mut out = Vec::new();
        for (color, pixels) in color_groups(grid) {
            for px in line_runs(&pixels).into_iter().chain([pixels]) {
                if seen.insert(px.clone()) {
                    let mut o = object_from_pixels(&px);
                    o.color = color;
                    out.push(o);
                }
            }
        }
        out
    }

    /// Plain-float smoothed L1, used to pick argmin candidates without
    /// building a tensor graph per candidate.
    fn smooth_l1_f64(m: &[f64], t: &[f64]) -> f64 {
        m.iter()
            .zip(t)
            .map(|(a, b)| ((a - b) * (a - b) + 1e-4).sqrt() - 0.01)
            .sum()
    }

    fn row_values(m: &Tensor) -> Result<Vec<f64>> {
        Ok(m.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    /// Per-row smoothed |diff| with bounded derivative d/sqrt(d² + δ),
    /// with its resting value at zero difference subtracted so a perfect
    /// match costs exactly zero. (B, ...) in, (B,) out.
    fn smooth_l1_rows(diff: &Tensor) -> Result<Tensor> {
        let b = diff.dims()[0];
        let per = diff.elem_count() / b;
        let d = (diff.sqr()? + 1e-4)?
            .sqrt()?
            .reshape((b, per))?
            .sum(D::Minus1)?;
        Ok((d - 0.01 * per as f64)?)
    }

    /// d + 4·sqrt(d + 1/2), shifted so d = 0 scores exactly `-bonus`.
    /// Elementwise over (B,) rows.
    fn shape_energy(d: &Tensor, bonus: &Tensor) -> Result<Tensor> {
        let concave = ((d + 0.5)?.sqrt()? * 4.0)?;
        Ok((((d + concave)? - 4.0 * 0.5f64.sqrt())? - bonus)?)
    }

    fn const_rows(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
        let n = values.len();
        Ok(Tensor::from_vec(values, n, like.device())?.to_dtype(like.dtype())?)
    }

    impl ConceptScorer for AnalyticModels {
        fn vocabulary(&self) -> Vec<String> {
            self.concept_vocab.clone()
        }

        fn concept_energy_for(&self, x: &Tensor, m: &Tensor, label: &str) -> Result<Tensor> {
            if !self.concept_vocab.iter().any(|l| l == label) {
                return Err(ZcError::Vocabulary(format!("unknown concept `{label}`")));
            }
            let n = x.dims()[0];
            let mv = row_values(m)?;
            let per = mv.len() / n;
            let mut targets = Vec::with_capacity(n);
            let mut bonus = Vec::with_capacity(n);
            for i in 0..n {
                let grid = grid_from_image(&x.narrow(0, i, 1)?.squeeze(0)?, self.domain)?;
                let scene = self.scene(&grid)?;
                let row = &mv[i * per..(i + 1) * per];
                // Rank candidates by distance minus the candidate's
                // empty-mask baseline. Raw distance would make every far
                // slot choose the smallest object in the scene; the
                // normalized score measures progress toward a candidate
                // instead of its size. Ties (a run versus its extension)
                // fall back to raw distance so the chosen target is the
                // one the mask actually matches.
                let mut best: Option<(f64, f64, usize)> = None;
                for k in scene.concept_candidates(label) {
                    let dv = smooth_l1_f64(row, &scene.target_vals[k]);
                    let score = dv - scene.target_base[k];
                    let better = best.map_or(true, |(bs, bd, _)| {
                        score < bs - 1e-9 || (score < bs + 1e-9 && dv < bd)
                    });
                    if better {
                        best = Some((score, dv, k));
                    }
                }
                // No instance of the label present: the empty mask is the
                // minimizer, and the match bonus is withheld so a template
                // cannot profit from nodes that bind to nothing.
                match best {
                    Some((_, _, k)) => {
                        targets.push(scene.targets[k].clone());
                        bonus.push(MATCH_BONUS);
                    }
                    None => {
                        targets.push(m.narrow(0, i, 1)?.zeros_like()?);
                        bonus.push(0.0);
                    }
                }
            }
            let t = Tensor::cat(&targets, 0)?.to_dtype(m.dtype())?;
            let d = smooth_l1_rows(&(m - t)?)?;
            shape_energy(&d, &const_rows(bonus, &d)?)
        }
    }

    impl RelationScorer for AnalyticModels {
        fn vocabulary(&self) -> Vec<String> {
            self.relation_vocab.clone()
        }

        fn relation_energy_for(
            &self,
            x: &Tensor,
            m1: &Tensor,
            m2: &Tensor,
            label: &str,
        ) -> Result<Tensor> {
            if !self.relation_vocab.iter().any(|l| l == label) {
                return Err(ZcError::Vocabulary(format!("unknown relation `{label}`")));
            }
            let n = x.dims()[0];
            let v1 = row_values(m1)?;
            let v2 = row_values(m2)?;
            let per = v1.len() / n;
            let mut t1 = Vec::with_capacity(n);
            let mut t2 = Vec::with_capacity(n);
            let mut sel = Vec::with_capacity(n);
            for i in 0..n {
                let grid = grid_from_image(&x.narrow(0, i, 1)?.squeeze(0)?, self.domain)?;
                let scene = self.scene(&grid)?;
                // Distance to the nearest pair of scene objects for which
                // the predicate actually holds, so the sampler has a
                // gradient toward relation-satisfying placements instead
                // of a 0/1 verdict on whatever the masks happen to cover.
                let (r1, r2) = (&v1[i * per..(i + 1) * per], &v2[i * per..(i + 1) * per]);
                let d1: Vec<f64> = scene
                    .target_vals
                    .iter()
                    .map(|t| smooth_l1_f64(r1, t))
                    .collect();
                let d2: Vec<f64> = scene
                    .target_vals
                    .iter()
                    .map(|t| smooth_l1_f64(r2, t))
                    .collect();
                let mut best: Option<(f64, usize, usize)> = None;
                for &(ai, bi) in scene.satisfying_pairs(label)?.iter() {
                    let dv = d1[ai] + d2[bi];
                    if best.map_or(true, |(e, _, _)| dv < e) {
                        best = Some((dv, ai, bi));
                    }
                }
                match best {
                    Some((_, ai, bi)) => {
                        t1.push(scene.targets[ai].clone());
                        t2.push(scene.targets[bi].clone());
                        sel.push(1.0);
                    }
                    // No satisfying pair anywhere in the scene: a flat
                    // penalty well above the residual noise on the concept
                    // terms, so one impossible relation dominates scene
                    // ranking.
                    None => {
                        t1.push(m1.narrow(0, i, 1)?.zeros_like()?);
                        t2.push(m2.narrow(0, i, 1)?.zeros_like()?);
                        sel.push(0.0);
                    }
                }
            }
            let ta = Tensor::cat(&t1, 0)?.to_dtype(m1.dtype())?;
            let tb = Tensor::cat(&t2, 0)?.to_dtype(m2.dtype())?;
            let d = (smooth_l1_rows(&(m1 - ta)?)? + smooth_l1_rows(&(m2 - tb)?)?)?;
            let bonus = vec![MATCH_BONUS; n];
            let paired = shape_energy(&d, &const_rows(bonus, &d)?)?;
            // Unpaired rows read the flat penalty; the select factor also
            // zeroes their (meaningless) distance gradient.
            let sel = const_rows(sel, &d)?;
            let miss = ((sel.clone() * (-MISS_PENALTY))? + MISS_PENALTY)?;
            Ok(((paired * sel)? + miss)?.to_dtype(x.dtype())?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::analytic::AnalyticModels;
    use super::*;
    use crate::corpus::{line_at, render_domain, Grid};
    use candle_core::Device;
    use rand::SeedableRng;

    /// E(x, m) = Σ_p (m_p - g_p)² for a fixed target, ignoring x.
    struct TargetEnergy {
        target: Tensor, // (1, 1, H, W)
    }

    impl MaskEnergy for TargetEnergy {
        fn num_slots(&self) -> usize {
            1
        }

        fn energy(&self, x: &Tensor, masks: &[Tensor]) -> Result<Tensor> {
            let n = x.dims()[0];
            let t = self.target.expand(masks[0].dims())?;
            let d = (masks[0].clone() - t)?.sqr()?;
            Ok(d.reshape((n, ()))?.sum(D::Minus1)?)
        }
    }

    fn line_image(h: usize, w: usize) -> (Tensor, Tensor) {
        let mut grid = Grid::new(h, w).unwrap();
        let obj = line_at(3, 2, 6, true, 1).unwrap();
        grid.paint(&obj).unwrap();
        let x = render_domain(&grid, 1).unwrap();
        let g = crate::corpus::mask_to_tensor(&obj.pixels, h, w, 1)
            .unwrap()
            .unsqueeze(0)
            .unwrap();
        (x, g)
    }

    fn iou(a: &Tensor, b: &Tensor) -> f64 {
        let av = a.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let bv = b.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let (mut inter, mut uni) = (0usize, 0usize);
        for (x, y) in av.iter().zip(&bv) {
            let (x, y) = (*x > 0.5, *y > 0.5);
            inter += (x && y) as usize;
            uni += (x || y) as usize;
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    #[test]
    fn detection_recovers_the_analytic_minimizer() {
        let (x, g) = line_image(12, 12);
        let energy = TargetEnergy { target: g.clone() };
        let mut cfg = DetectConfig::for_classification();
        cfg.ensemble = 8;
        cfg.sgld = SgldConfig::for_masks(80);
        cfg.sgld.polish_steps = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = detect(&energy, &x, &cfg, &mut rng).unwrap();
        assert!(iou(&out.masks[0], &g) >= 0.99);
        for e in &out.energies {
            assert!(out.best_energy <= *e);
        }
    }

    #[test]
    fn single_chain_detection_equals_a_raw_sampler_call() {
        let (x, g) = line_image(10, 10);
        let energy = TargetEnergy { target: g };
        let mut cfg = DetectConfig::for_classification();
        cfg.ensemble = 1;
        cfg.sgld = SgldConfig::for_masks(20);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = detect(&energy, &x, &cfg, &mut rng).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init =
            init_uniform(&[1, 1, 10, 10], x.dtype(), x.device(), &mut rng).unwrap();
        let xb = x.unsqueeze(0).unwrap();
        let raw = sgld(
            |s| energy.energy(&xb, s),
            &[init],
            &cfg.sgld,
            &mut rng,
        )
        .unwrap();
        let a = out.masks[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = raw.states[0].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        assert_eq!(out.best_energy, raw.energies[0]);
    }

    #[test]
    fn softmax_readout_matches_closed_form() {
        let p = softmax_readout(&[1.0, 3.0]);
        assert!((p[0] - 0.8808).abs() < 1e-4, "{p:?}");
        assert!((p[1] - 0.1192).abs() < 1e-4);
        let q = softmax_readout(&[2.0, 2.0]);
        assert!((q[0] - 0.5).abs() < 1e-12 && (q[1] - 0.5).abs() < 1e-12);
        // Shift invariance.
        let shifted = softmax_readout(&[101.0, 103.0]);
        assert!((p[0] - shifted[0]).abs() < 1e-12);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn overlap_energy_matches_the_formula() {
        let dev = Device::Cpu;
        let ones = Tensor::ones((1, 1, 4, 5), DType::F32, &dev).unwrap();
        let e = overlap_energy(&[ones.clone(), ones.clone()]).unwrap();
        assert_eq!(e.to_vec1::<f32>().unwrap(), vec![20.0]);

        let mut a = vec![0f32; 9];
        let mut b = vec![0f32; 9];
        a[0] = 1.0;
        b[8] = 1.0;
        let ta = Tensor::from_vec(a, (1, 1, 3, 3), &dev).unwrap();
        let tb = Tensor::from_vec(b, (1, 1, 3, 3), &dev).unwrap();
        let e = overlap_energy(&[ta, tb]).unwrap();
        assert_eq!(e.to_vec1::<f32>().unwrap(), vec![0.0]);

        let half = Tensor::full(0.5f32, (1, 1, 1, 1), &dev).unwrap();
        let e = overlap_energy(&[half.clone(), half.clone(), half]).unwrap();
        assert_eq!(e.to_vec1::<f32>().unwrap(), vec![0.5]);
    }

    fn two_parallel_lines(domain: u8) -> Tensor {
        let mut grid = Grid::new(16, 16).unwrap();
        grid.paint(&line_at(3, 2, 5, true, 1).unwrap()).unwrap();
        grid.paint(&line_at(8, 2, 5, true, 2).unwrap()).unwrap();
        render_domain(&grid, domain).unwrap()
    }

    fn letter_models(domain: u8) -> AnalyticModels {
        AnalyticModels::new(domain, &["line"], &["parallel", "perp-mid", "perp-edge"])
    }

    fn parse_config() -> ParseConfig {
        let mut cfg = ParseConfig::default();
        cfg.overlap_weight = 4.0;
        // Objects cover only a few percent of the canvas, so the removal
        // threshold has to sit below a single line's mean activation.
        cfg.empty_threshold = 0.01;
        cfg.sgld = SgldConfig::for_masks(120);
        cfg.sgld.polish_steps = 60;
        cfg
    }

    #[test]
    fn parsing_two_parallel_lines_recovers_the_graph() {
        let x = two_parallel_lines(1);
        let models = letter_models(1);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = parse(&x, &models, &models, &parse_config(), &mut rng).unwrap();
        assert_eq!(g.nodes, vec!["line".to_string(), "line".to_string()]);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].label, "parallel");
    }

    #[test]
    fn extra_slots_for_a_single_line_are_removed_as_empty() {
        let mut grid = Grid::new(16, 16).unwrap();
        grid.paint(&line_at(5, 4, 7, true, 3).unwrap()).unwrap();
        let x = render_domain(&grid, 1).unwrap();
        let models = letter_models(1);
        let mut cfg = parse_config();
        cfg.max_instances = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = parse(&x, &models, &models, &cfg, &mut rng).unwrap();
        assert_eq!(g.nodes, vec!["line".to_string()]);
        assert!(g.edges.is_empty());
    }

    #[test]
    fn parsing_an_empty_image_is_an_error() {
        let grid = Grid::new(16, 16).unwrap();
        let x = render_domain(&grid, 1).unwrap();
        let models = letter_models(1);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let err = parse(&x, &models, &models, &parse_config(), &mut rng).unwrap_err();
        assert!(matches!(err, ZcError::Parse(_)));
    }

    #[test]
    fn acquisition_transfers_a_concept_into_the_other_domain() {
        let x1 = two_parallel_lines(1);
        let sender = letter_models(1);
        let receiver = letter_models(2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let acq = acquire(
            &x1,
            &sender,
            &sender,
            &parse_config(),
            &receiver,
            &receiver,
            &mut rng,
        )
        .unwrap();
        assert_eq!(acq.graph.nodes.len(), 2);

        // Three domain-2 scenes; only the first shows parallel lines.
        let correct = two_parallel_lines(2);
        let mut g2 = Grid::new(16, 16).unwrap();
        g2.paint(&line_at(2, 4, 5, true, 1).unwrap()).unwrap();
        g2.paint(&line_at(3, 6, 5, false, 2).unwrap()).unwrap();
        let perp = render_domain(&g2, 2).unwrap();
        let mut g3 = Grid::new(16, 16).unwrap();
        g3.paint(&line_at(10, 3, 8, true, 4).unwrap()).unwrap();
        let single = render_domain(&g3, 2).unwrap();

        let mut cfg = DetectConfig::for_classification();
        cfg.ensemble = 16;
        cfg.sgld = SgldConfig::for_masks(120);
        cfg.sgld.polish_steps = 60;
        let out =
            classify_images(&acq.energy, &[correct, perp, single], &cfg, &mut rng).unwrap();
        assert_eq!(out.best, 0, "energies: {:?}", out.energies);
    }

    #[test]
    fn vocabulary_mismatch_is_a_channel_error() {
        let x1 = two_parallel_lines(1);
        let sender = letter_models(1);
        let receiver =
            AnalyticModels::new(2, &["rectangle"], &["parallel", "perp-mid", "perp-edge"]);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let err = match acquire(
            &x1,
            &sender,
            &sender,
            &parse_config(),
            &receiver,
            &receiver,
            &mut rng,
        ) {
            Ok(_) => panic!("acquire succeeded despite vocabulary mismatch"),
            Err(e) => e,
        };
        assert!(matches!(err, ZcError::Channel(_)));
    }
}
