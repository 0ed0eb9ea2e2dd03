//! Parameter store and pipeline assembly: dataset preparation (feature
//! tables to tensors), full-KG encoding, per-entity hybrid blocks, and the
//! gradient-free corpus embedding pass used by evaluation, replay and
//! iterative proposals.

use std::collections::{BTreeMap, HashMap};

use tensor_core::rng::Prng;
use tensor_core::{Tape, Tensor};

use crate::encoders::{
    gat_forward, modality_encode, Adjacency, GatParams, ModalityEncoderParams,
};
use crate::error::{MmeaError, Result};
use crate::kg::{impute_missing_visual, Mmkg, Modality, ModalityFeatureTable};
use crate::mmh::{mmh_entity, FfnParams, MhcaParams, MmhOutput};

/// All learnable tensors, addressable by name. The optimizer replaces
/// tensors in place; views for the encoders are cheap Arc clones, so
/// gradient ids always match the current store contents.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter '{name}'"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor.requires_grad());
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| MmeaError::Invalid(format!("unknown parameter '{name}'")))
    }

    pub fn set(&mut self, idx: usize, tensor: Tensor) {
        self.tensors[idx] = tensor.requires_grad();
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn tensor_at(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn name_at(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Gradient-free copy for inference passes; shares buffers.
    pub fn detached(&self) -> ParameterStore {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            out.index.insert(name.to_string(), out.tensors.len());
            out.names.push(name.to_string());
            out.tensors.push(t.detached());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Kg1,
    Kg2,
}

impl Side {
    pub fn graph_param(&self) -> &'static str {
        match self {
            Side::Kg1 => "xg.1",
            Side::Kg2 => "xg.2",
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Side::Kg1 => "kg1",
            Side::Kg2 => "kg2",
        }
    }
}

/// Model shape: hidden dims, head counts, active modalities, feature dims.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub d: usize,
    pub d_in: usize,
    pub mhca_heads: usize,
    pub gat_heads: usize,
    pub use_ffn: bool,
    /// Canonical-ordered active modalities; always contains Graph.
    pub modalities: Vec<Modality>,
    /// Raw feature dim per non-graph modality.
    pub feature_dims: BTreeMap<Modality, usize>,
    pub entities_kg1: usize,
    pub entities_kg2: usize,
}

impl ModelSpec {
    pub fn fused_dim(&self) -> usize {
        self.modalities.len() * self.d
    }

    /// Initializes every learnable tensor with a deterministic layout:
    /// entity embeddings, GAT stack, per-modality encoders, hybrid block.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        let mut rng = Prng::new(seed);
        let mut store = ParameterStore::new();

        let mut emb_rng = rng.fork(10);
        let scale = 1.0 / (self.d as f64).sqrt();
        for (name, count) in [("xg.1", self.entities_kg1), ("xg.2", self.entities_kg2)] {
            let data: Vec<f64> = (0..count * self.d)
                .map(|_| emb_rng.normal_with(0.0, scale))
                .collect();
            store.insert(name, Tensor::matrix(count, self.d, data)?);
        }

        let mut gat_rng = rng.fork(11);
        let gat = GatParams::init(self.d, self.gat_heads, &mut gat_rng)?;
        for (name, t) in gat.named_tensors() {
            store.insert(name, t.clone());
        }

        let mut enc_rng = rng.fork(12);
        for m in &self.modalities {
            if *m == Modality::Graph {
                continue;
            }
            let d_m = *self.feature_dims.get(m).ok_or_else(|| {
                MmeaError::Config(format!("no feature dim recorded for modality {m}"))
            })?;
            let enc = ModalityEncoderParams::init(d_m, self.d, &mut enc_rng);
            store.insert(format!("enc.{m}.w"), enc.weight);
            store.insert(format!("enc.{m}.b"), enc.bias);
        }

        let mut mmh_rng = rng.fork(13);
        let mhca = MhcaParams::init(self.d, self.mhca_heads, &mut mmh_rng)?;
        for (name, t) in mhca.named_tensors() {
            store.insert(name, t.clone());
        }
        if self.use_ffn {
            let ffn = FfnParams::init(self.d, self.d_in, true, &mut mmh_rng);
            for (name, t) in ffn.named_tensors() {
                store.insert(name, t.clone());
            }
        }
        Ok(store)
    }

    pub fn gat_view(&self, store: &ParameterStore) -> Result<GatParams> {
        let mut layers = Vec::with_capacity(2);
        for l in 0..2 {
            let mut heads = Vec::with_capacity(self.gat_heads);
            for h in 0..self.gat_heads {
                heads.push(crate::encoders::GatHeadParams {
                    weight: store.get(&format!("gat.l{l}.h{h}.w"))?.clone(),
                    attn_src: store.get(&format!("gat.l{l}.h{h}.a_src"))?.clone(),
                    attn_dst: store.get(&format!("gat.l{l}.h{h}.a_dst"))?.clone(),
                });
            }
            layers.push(crate::encoders::GatLayerParams { heads });
        }
        Ok(GatParams {
            input_diag: store.get("gat.diag")?.clone(),
            layers,
        })
    }

    pub fn encoder_view(&self, store: &ParameterStore, m: Modality) -> Result<ModalityEncoderParams> {
        Ok(ModalityEncoderParams {
            weight: store.get(&format!("enc.{m}.w"))?.clone(),
            bias: store.get(&format!("enc.{m}.b"))?.clone(),
        })
    }

    pub fn mhca_view(&self, store: &ParameterStore) -> Result<MhcaParams> {
        let mut heads = Vec::with_capacity(self.mhca_heads);
        for i in 0..self.mhca_heads {
            heads.push(crate::mmh::MhcaHeadParams {
                w_q: store.get(&format!("mhca.h{i}.wq"))?.clone(),
                w_k: store.get(&format!("mhca.h{i}.wk"))?.clone(),
                w_v: store.get(&format!("mhca.h{i}.wv"))?.clone(),
            });
        }
        Ok(MhcaParams {
            heads,
            w_o: store.get("mhca.wo")?.clone(),
            ln_gain: store.get("mhca.ln.gain")?.clone(),
            ln_bias: store.get("mhca.ln.bias")?.clone(),
        })
    }

    pub fn ffn_view(&self, store: &ParameterStore) -> Result<Option<FfnParams>> {
        if !self.use_ffn {
            return Ok(None);
        }
        Ok(Some(FfnParams {
            enabled: true,
            w1: store.get("ffn.w1")?.clone(),
            b1: store.get("ffn.b1")?.clone(),
            w2: store.get("ffn.w2")?.clone(),
            b2: store.get("ffn.b2")?.clone(),
            ln_gain: store.get("ffn.ln.gain")?.clone(),
            ln_bias: store.get("ffn.ln.bias")?.clone(),
        }))
    }
}

/// Constant per-KG inputs: adjacency mask plus raw feature tensor per
/// non-graph modality.
pub struct KgData {
    pub adjacency: Adjacency,
    pub features: BTreeMap<Modality, Tensor>,
}

/// Per-modality encoded embeddings for every entity of one KG.
pub type Encoded = BTreeMap<Modality, Tensor>;

/// Runs the per-modality encoders over a whole KG.
pub fn encode_side(
    spec: &ModelSpec,
    tape: &Tape,
    store: &ParameterStore,
    kg: &KgData,
    side: Side,
) -> Result<Encoded> {
    let mut out = BTreeMap::new();
    for m in &spec.modalities {
        let h = if *m == Modality::Graph {
            let gat = spec.gat_view(store)?;
            gat_forward(tape, &gat, &kg.adjacency, store.get(side.graph_param())?)?
        } else {
            let enc = spec.encoder_view(store, *m)?;
            let x = kg.features.get(m).ok_or_else(|| {
                MmeaError::Invalid(format!("no raw features for modality {m}"))
            })?;
            modality_encode(tape, &enc, x)?
        };
        out.insert(*m, h);
    }
    Ok(out)
}

/// Runs the hybrid block for a list of entities of one encoded KG.
pub fn mmh_for_entities(
    spec: &ModelSpec,
    tape: &Tape,
    store: &ParameterStore,
    encoded: &Encoded,
    entities: &[usize],
) -> Result<Vec<MmhOutput>> {
    let mhca = spec.mhca_view(store)?;
    let ffn = spec.ffn_view(store)?;
    let mut out = Vec::with_capacity(entities.len());
    for &e in entities {
        let rows: Vec<Tensor> = spec
            .modalities
            .iter()
            .map(|m| tape.row(&encoded[m], e))
            .collect::<std::result::Result<_, _>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        let h = tape.concat_rows(&refs)?;
        out.push(mmh_entity(tape, &mhca, ffn.as_ref(), &h)?);
    }
    Ok(out)
}

/// Stacks one tensor-producing field of per-entity outputs into a (B × k)
/// matrix.
pub fn stack<'a>(
    tape: &Tape,
    outputs: impl Iterator<Item = &'a Tensor>,
) -> Result<Tensor> {
    let rows: Vec<&Tensor> = outputs.collect();
    Ok(tape.concat_rows(&rows)?)
}

/// Plain-value embeddings for every entity of one side, used by evaluation,
/// hard-negative replay and iterative proposals.
pub struct CorpusEmbeddings {
    /// Cosine-normalized fused h^μ per entity.
    pub fused: Vec<Vec<f64>>,
    /// Meta modality weights per entity (canonical modality order).
    pub weights: Vec<Vec<f64>>,
}

/// Gradient-free full-corpus pass: encode, hybrid block per entity,
/// normalize the fused embedding.
pub fn corpus_embeddings(
    spec: &ModelSpec,
    store: &ParameterStore,
    kg: &KgData,
    side: Side,
) -> Result<CorpusEmbeddings> {
    let detached = store.detached();
    let tape = Tape::new();
    let encoded = encode_side(spec, &tape, &detached, kg, side)?;
    let n = kg.adjacency.n;
    let all: Vec<usize> = (0..n).collect();
    let outputs = mmh_for_entities(spec, &tape, &detached, &encoded, &all)?;
    let mut fused = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for o in outputs {
        let (unit, _) = tape.l2_normalize(&o.fused_early)?;
        fused.push(unit.data().to_vec());
        weights.push(o.weights.data().to_vec());
    }
    debug_assert!(tape.is_empty(), "inference pass must not record");
    Ok(CorpusEmbeddings { fused, weights })
}

/// Everything derived from a dataset pair before training: constant feature
/// tensors, adjacency, the model spec, and preparation notes.
pub struct PreparedPair {
    pub spec: ModelSpec,
    pub kg1: KgData,
    pub kg2: KgData,
    /// Type labels dropped because of vocabulary caps.
    pub dropped_types: Vec<String>,
    /// Entities whose visual vectors were imputed, per side.
    pub imputed: (Vec<usize>, Vec<usize>),
    /// Modalities requested but unavailable in the data.
    pub skipped_modalities: Vec<Modality>,
}

/// Preparation knobs (a subset of the run configuration).
pub struct PrepareOptions {
    pub d: usize,
    pub d_in: usize,
    pub mhca_heads: usize,
    pub gat_heads: usize,
    pub use_ffn: bool,
    pub modalities: Vec<Modality>,
    pub relation_vocab_cap: Option<usize>,
    pub attribute_vocab_cap: Option<usize>,
    pub seed: u64,
}

fn table_tensor(table: &ModalityFeatureTable) -> Result<Tensor> {
    let n = table.vectors.len();
    let mut data = Vec::with_capacity(n * table.dim);
    for row in &table.vectors {
        data.extend_from_slice(row);
    }
    Ok(Tensor::matrix(n, table.dim, data)?)
}

/// Builds constant inputs and the model spec for a KG pair. Bag-of-words
/// vocabularies are shared across both KGs so the vectors are comparable;
/// missing visual rows are imputed per side from that side's statistics.
pub fn prepare_pair(kg1: &Mmkg, kg2: &Mmkg, opts: &PrepareOptions) -> Result<PreparedPair> {
    let mut modalities: Vec<Modality> = Modality::ALL
        .iter()
        .copied()
        .filter(|m| opts.modalities.contains(m))
        .collect();
    if !modalities.contains(&Modality::Graph) {
        return Err(MmeaError::Config(
            "the graph modality cannot be disabled".into(),
        ));
    }

    let mut dropped_types = Vec::new();
    let mut skipped = Vec::new();
    let mut features1: BTreeMap<Modality, Tensor> = BTreeMap::new();
    let mut features2: BTreeMap<Modality, Tensor> = BTreeMap::new();
    let mut feature_dims: BTreeMap<Modality, usize> = BTreeMap::new();
    let mut imputed = (Vec::new(), Vec::new());
    let mut rng = Prng::new(opts.seed);

    let mut keep: Vec<Modality> = Vec::new();
    for m in modalities.drain(..) {
        match m {
            Modality::Graph => keep.push(m),
            Modality::Relation | Modality::Attribute => {
                let cap = if m == Modality::Relation {
                    opts.relation_vocab_cap
                } else {
                    opts.attribute_vocab_cap
                };
                let vocab = crate::kg::bow_vocab(&[kg1, kg2], m, cap)?;
                if vocab.is_empty() {
                    skipped.push(m);
                    continue;
                }
                let bow1 = crate::kg::build_bow_features(kg1, m, &vocab)?;
                let bow2 = crate::kg::build_bow_features(kg2, m, &vocab)?;
                dropped_types.extend(bow1.dropped_types);
                dropped_types.extend(bow2.dropped_types);
                feature_dims.insert(m, vocab.len());
                features1.insert(m, table_tensor(&bow1.table)?);
                features2.insert(m, table_tensor(&bow2.table)?);
                keep.push(m);
            }
            Modality::Visual | Modality::Surface => {
                let (t1, t2) = (kg1.feature_table(m), kg2.feature_table(m));
                let (t1, t2) = match (t1, t2) {
                    (Some(a), Some(b)) if a.dim == b.dim => (a, b),
                    (Some(a), Some(b)) => {
                        return Err(MmeaError::Invalid(format!(
                            "modality {m}: dims differ across KGs ({} vs {})",
                            a.dim, b.dim
                        )))
                    }
                    _ => {
                        skipped.push(m);
                        continue;
                    }
                };
                let mut finish = |table: &ModalityFeatureTable,
                                  which: Side,
                                  rng: &mut Prng|
                 -> Result<Option<ModalityFeatureTable>> {
                    if table.all_available() {
                        return Ok(Some(table.clone()));
                    }
                    if m == Modality::Visual {
                        if table.available_count() == 0 {
                            return Ok(None);
                        }
                        let (filled, rows) = impute_missing_visual(table, rng.next_u64())?;
                        match which {
                            Side::Kg1 => imputed.0 = rows,
                            Side::Kg2 => imputed.1 = rows,
                        }
                        Ok(Some(filled))
                    } else {
                        // missing surface rows stay zero vectors
                        Ok(Some(table.clone()))
                    }
                };
                let f1 = finish(t1, Side::Kg1, &mut rng)?;
                let f2 = finish(t2, Side::Kg2, &mut rng)?;
                match (f1, f2) {
                    (Some(a), Some(b)) => {
                        feature_dims.insert(m, a.dim);
                        features1.insert(m, table_tensor(&a)?);
                        features2.insert(m, table_tensor(&b)?);
                        keep.push(m);
                    }
                    _ => skipped.push(m),
                }
            }
        }
    }

    let spec = ModelSpec {
        d: opts.d,
        d_in: opts.d_in,
        mhca_heads: opts.mhca_heads,
        gat_heads: opts.gat_heads,
        use_ffn: opts.use_ffn,
        modalities: keep,
        feature_dims,
        entities_kg1: kg1.entity_count(),
        entities_kg2: kg2.entity_count(),
    };
    Ok(PreparedPair {
        spec,
        kg1: KgData {
            adjacency: Adjacency::from_kg(kg1),
            features: features1,
        },
        kg2: KgData {
            adjacency: Adjacency::from_kg(kg2),
            features: features2,
        },
        dropped_types,
        imputed,
        skipped_modalities: skipped,
    })
}
