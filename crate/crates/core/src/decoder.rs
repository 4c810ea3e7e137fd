//! The bilingual decoder: both languages share one spliced `[E; C]` block
//! through every layer and are emitted by two output projections.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{cross_attend, ffn, self_attend_language, FfnParams, MaskSpec, MultiHeadParams, MASK_BIAS};
use crate::ehat::{causal_ehat, CausalInputs, EhatSwitches, EhatTrace, HarnParams, HarnReading, HarnSpec, HarnVariant};
use crate::graph::{softmax_in_place, Graph, Mode, Var};
use crate::params::{ParamId, ParameterStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{math, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const LN_EPS: f64 = 1e-5;

/// Token table with the four reserved ids in front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in the given order. Duplicates and
    /// reserved spellings are rejected.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: BTreeMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string())?;
        }
        for w in words {
            let w = w.into();
            if RESERVED.contains(&w.as_str()) {
                return Err(Error::data(format!("`{w}` is a reserved token")));
            }
            v.push(w)?;
        }
        Ok(v)
    }

    fn push(&mut self, w: String) -> Result<()> {
        if self.index.contains_key(&w) {
            return Err(Error::data(format!("duplicate token `{w}`")));
        }
        self.index.insert(w.clone(), self.tokens.len());
        self.tokens.push(w);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    /// Id of `w`, or [`UNK`].
    pub fn id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, w: &str) -> bool {
        self.index.contains_key(w)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    /// Tokens for `ids`, stopping at EOS and skipping PAD and BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }

    /// Corpus words (reserved entries excluded).
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabPair {
    pub a: Vocab,
    pub b: Vocab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EhatPlacement {
    /// One EHAT block inside every decoder layer.
    PerLayer,
    /// A single EHAT block after the last layer.
    Top,
    /// Plain decoder.
    None,
}

impl EhatPlacement {
    pub fn name(self) -> &'static str {
        match self {
            EhatPlacement::PerLayer => "per_layer",
            EhatPlacement::Top => "top",
            EhatPlacement::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_layer" => Ok(EhatPlacement::PerLayer),
            "top" => Ok(EhatPlacement::Top),
            "none" => Ok(EhatPlacement::None),
            _ => Err(Error::config(format!("unknown EHAT placement `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub m_max: usize,
    pub lambda: f64,
    pub harn_variant: HarnVariant,
    pub harn_reading: HarnReading,
    pub harn_tie_visual: bool,
    pub harn_zero_output: bool,
    pub dropout: f64,
    pub vocab_a: usize,
    pub vocab_b: usize,
    pub placement: EhatPlacement,
    pub mhca: bool,
    pub harn: bool,
    pub hca: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 512,
            layers: 6,
            heads: 8,
            d_ff: 2048,
            m_max: 20,
            lambda: 0.3,
            harn_variant: HarnVariant::Prototype,
            harn_reading: HarnReading::Concat,
            harn_tie_visual: false,
            harn_zero_output: false,
            dropout: 0.1,
            vocab_a: 9487,
            vocab_b: 9532,
            placement: EhatPlacement::PerLayer,
            mhca: true,
            harn: true,
            hca: true,
        }
    }
}

fn parse_num<T: core::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("bad value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

impl DecoderConfig {
    /// Small configuration for tests and toy runs.
    pub fn tiny(d_model: usize, layers: usize, vocab_a: usize, vocab_b: usize) -> Self {
        DecoderConfig {
            d_model,
            layers,
            heads: if d_model.is_multiple_of(2) { 2 } else { 1 },
            d_ff: 4 * d_model,
            vocab_a,
            vocab_b,
            ..DecoderConfig::default()
        }
    }

    pub const KEYS: [&'static str; 17] = [
        "d_model",
        "layers",
        "heads",
        "d_ff",
        "m_max",
        "lambda",
        "harn_variant",
        "harn_reading",
        "harn_tie_visual",
        "harn_zero_output",
        "dropout",
        "vocab_a",
        "vocab_b",
        "ehat_placement",
        "mhca",
        "harn",
        "hca",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.m_max < 1 {
            return Err(Error::config("m_max must be >= 1"));
        }
        if self.layers < 1 {
            return Err(Error::config("layers must be >= 1"));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(Error::config("d_ff must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.vocab_a <= RESERVED.len() || self.vocab_b <= RESERVED.len() {
            return Err(Error::config("each vocabulary needs at least one word"));
        }
        if self.harn_tie_visual && self.harn_variant != HarnVariant::Prototype {
            return Err(Error::config("harn_tie_visual needs harn_variant = prototype"));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "d_model" => self.d_model = parse_num(key, v)?,
            "layers" => self.layers = parse_num(key, v)?,
            "heads" => self.heads = parse_num(key, v)?,
            "d_ff" => self.d_ff = parse_num(key, v)?,
            "m_max" => self.m_max = parse_num(key, v)?,
            "lambda" => self.lambda = parse_num(key, v)?,
            "harn_variant" => self.harn_variant = HarnVariant::parse(v.trim())?,
            "harn_reading" => self.harn_reading = HarnReading::parse(v.trim())?,
            "harn_tie_visual" => self.harn_tie_visual = parse_bool(key, v)?,
            "harn_zero_output" => self.harn_zero_output = parse_bool(key, v)?,
            "dropout" => self.dropout = parse_num(key, v)?,
            "vocab_a" => self.vocab_a = parse_num(key, v)?,
            "vocab_b" => self.vocab_b = parse_num(key, v)?,
            "ehat_placement" => self.placement = EhatPlacement::parse(v.trim())?,
            "mhca" => self.mhca = parse_bool(key, v)?,
            "harn" => self.harn = parse_bool(key, v)?,
            "hca" => self.hca = parse_bool(key, v)?,
            _ => return Err(Error::config(format!("unknown decoder key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("m_max", self.m_max.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("harn_variant", self.harn_variant.name().to_string()),
            ("harn_reading", self.harn_reading.name().to_string()),
            ("harn_tie_visual", self.harn_tie_visual.to_string()),
            ("harn_zero_output", self.harn_zero_output.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("vocab_a", self.vocab_a.to_string()),
            ("vocab_b", self.vocab_b.to_string()),
            ("ehat_placement", self.placement.name().to_string()),
            ("mhca", self.mhca.to_string()),
            ("harn", self.harn.to_string()),
            ("hca", self.hca.to_string()),
        ]
    }

    fn harn_spec(&self) -> HarnSpec {
        HarnSpec {
            variant: self.harn_variant,
            reading: self.harn_reading,
            similarity: self.harn,
            tie_visual: self.harn_tie_visual,
            zero_output: self.harn_zero_output,
        }
    }

    fn switches(&self) -> EhatSwitches {
        EhatSwitches {
            mhca: self.mhca,
            hca: self.hca,
            lambda: self.lambda,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    fn init(store: &mut ParameterStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.insert(format!("{prefix}.gamma"), Tensor::filled(1, d, 1.0))?,
            beta: store.insert(format!("{prefix}.beta"), Tensor::zeros(1, d))?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParameterStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct EhatBlock {
    pub norm: NormParams,
    pub harn: HarnParams,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub norm_self: NormParams,
    pub self_attn: MultiHeadParams,
    pub norm_cross: NormParams,
    pub cross_attn: MultiHeadParams,
    pub ehat: Option<EhatBlock>,
    pub norm_ffn: NormParams,
    pub ffn: FfnParams,
}

#[derive(Clone, Copy, Debug)]
pub struct Generator {
    pub w: ParamId,
    pub b: ParamId,
}

/// Decoder parameters plus the ids that locate them in the store.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: DecoderConfig,
    pub store: ParameterStore,
    pub embed_a: ParamId,
    pub embed_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub top: Option<EhatBlock>,
    pub final_norm: NormParams,
    pub gen_a: Generator,
    pub gen_b: Generator,
}

fn ehat_block(store: &mut ParameterStore, prefix: &str, cfg: &DecoderConfig, rng: &RngStream) -> Result<EhatBlock> {
    Ok(EhatBlock {
        norm: NormParams::init(store, &format!("{prefix}.norm"), cfg.d_model)?,
        harn: HarnParams::init(store, &format!("{prefix}.harn"), cfg.d_model, &cfg.harn_spec(), rng)?,
    })
}

impl Model {
    /// Fresh parameters. Each tensor is drawn from a stream keyed by its
    /// path, so two configurations share the values of every common path.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let rng = RngStream::new(seed);
        let d = config.d_model;
        let mut store = ParameterStore::new();
        let embed_a = store.insert_normal_keyed("embed.a", config.vocab_a, d, 1.0, &rng)?;
        let embed_b = store.insert_normal_keyed("embed.b", config.vocab_b, d, 1.0, &rng)?;
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("layer{i}");
            let norm_self = NormParams::init(&mut store, &format!("{p}.norm_self"), d)?;
            let self_attn = MultiHeadParams::init(&mut store, &format!("{p}.self"), d, config.heads, &rng)?;
            let norm_cross = NormParams::init(&mut store, &format!("{p}.norm_cross"), d)?;
            let cross_attn = MultiHeadParams::init(&mut store, &format!("{p}.cross"), d, config.heads, &rng)?;
            let ehat = if config.placement == EhatPlacement::PerLayer {
                Some(ehat_block(&mut store, &format!("{p}.ehat"), &config, &rng)?)
            } else {
                None
            };
            let norm_ffn = NormParams::init(&mut store, &format!("{p}.norm_ffn"), d)?;
            let ffn = FfnParams::init(&mut store, &format!("{p}.ffn"), d, config.d_ff, &rng)?;
            layers.push(LayerParams {
                norm_self,
                self_attn,
                norm_cross,
                cross_attn,
                ehat,
                norm_ffn,
                ffn,
            });
        }
        let top = if config.placement == EhatPlacement::Top {
            Some(ehat_block(&mut store, "top.ehat", &config, &rng)?)
        } else {
            None
        };
        let final_norm = NormParams::init(&mut store, "final_norm", d)?;
        let gen_a = Generator {
            w: store.insert_linear_keyed("gen.a.w", d, config.vocab_a, &rng)?,
            b: store.insert("gen.a.b", Tensor::zeros(1, config.vocab_a))?,
        };
        let gen_b = Generator {
            w: store.insert_linear_keyed("gen.b.w", d, config.vocab_b, &rng)?,
            b: store.insert("gen.b.b", Tensor::zeros(1, config.vocab_b))?,
        };
        Ok(Model {
            config,
            store,
            embed_a,
            embed_b,
            layers,
            top,
            final_norm,
            gen_a,
            gen_b,
        })
    }

    /// Rebuild a model around stored values; the path set and every shape
    /// must match what `config` would create.
    pub fn from_store(config: DecoderConfig, store: ParameterStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        let want = model.store.paths();
        let got = store.paths();
        if want.len() != got.len() {
            return Err(Error::data(format!(
                "checkpoint has {} tensors, configuration expects {}",
                got.len(),
                want.len()
            )));
        }
        for path in &want {
            let Some(v) = store.get(path) else {
                return Err(Error::data(format!("checkpoint is missing `{path}`")));
            };
            let slot = model.store.get_mut(path).expect("own path");
            if slot.shape() != v.shape() {
                return Err(Error::data(format!(
                    "`{path}` has shape {:?}, expected {:?}",
                    v.shape(),
                    slot.shape()
                )));
            }
            *slot = v.clone();
        }
        Ok(model)
    }

    pub fn vocab_size(&self, lang: usize) -> usize {
        if lang == 0 {
            self.config.vocab_a
        } else {
            self.config.vocab_b
        }
    }
}

/// Exact parameter counts per block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    pub embeddings: usize,
    /// Attention, FFN and normalization parameters of the plain decoder.
    pub decoder: usize,
    pub ehat: usize,
    pub ehat_per_layer: Vec<usize>,
    pub generators: usize,
    pub total: usize,
}

pub fn count_parameters(model: &Model) -> ParamCounts {
    let s = &model.store;
    let mut ehat_per_layer = Vec::new();
    for l in &model.layers {
        if let Some(b) = &l.ehat {
            ehat_per_layer.push(b.harn.count(s) + 2 * model.config.d_model);
        }
    }
    if let Some(b) = &model.top {
        ehat_per_layer.push(b.harn.count(s) + 2 * model.config.d_model);
    }
    let ehat: usize = ehat_per_layer.iter().sum();
    let embeddings = s.count_with_prefix("embed.");
    let generators = s.count_with_prefix("gen.");
    let total = s.total_count();
    ParamCounts {
        embeddings,
        decoder: total - embeddings - generators - ehat,
        ehat,
        ehat_per_layer,
        generators,
        total,
    }
}

/// `sin`/`cos` position signal for positions `0..m`.
pub fn sinusoidal_positions(m: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(m, d);
    for pos in 0..m {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / math::pow(10000.0, 2.0 * k / d as f64);
            t.set(pos, i, if i % 2 == 0 { math::sin(angle) } else { math::cos(angle) });
        }
    }
    t
}

/// Embedding lookup plus positions `offset..offset + len`.
pub fn embed_and_position(g: &mut Graph, table: Var, ids: &[usize], offset: usize) -> Result<Var> {
    let d = g.shape(table).1;
    let emb = g.gather_rows(table, ids)?;
    let pe = sinusoidal_positions(offset + ids.len(), d);
    let pe = Tensor::matrix(ids.len(), d, pe.data()[offset * d..].to_vec())?;
    g.add_const(emb, &pe)
}

/// Masks shared by every layer for one example.
#[derive(Clone, Debug)]
pub struct LayerMasks {
    pub self_mask: MaskSpec,
    pub region_mask: MaskSpec,
    pub valid_a: Vec<bool>,
    pub valid_b: Vec<bool>,
    pub region_valid: Vec<bool>,
}

impl LayerMasks {
    pub fn new(inputs_a: &[usize], inputs_b: &[usize], regions: usize) -> Result<Self> {
        let valid_a: Vec<bool> = inputs_a.iter().map(|&t| t != PAD).collect();
        let valid_b: Vec<bool> = inputs_b.iter().map(|&t| t != PAD).collect();
        let region_valid = vec![true; regions];
        Ok(LayerMasks {
            self_mask: MaskSpec::block_causal(&valid_a, &valid_b)?,
            region_mask: MaskSpec::padding(2 * inputs_a.len(), &region_valid),
            valid_a,
            valid_b,
            region_valid,
        })
    }
}

fn run_ehat(
    g: &mut Graph,
    model: &Model,
    block: &EhatBlock,
    l: Var,
    o: Var,
    masks: &LayerMasks,
    mode: Mode,
    rng: &RngStream,
) -> Result<(Var, EhatTrace)> {
    let store = &model.store;
    let normed = block.norm.apply(g, store, l)?;
    let inputs = CausalInputs {
        stream: l,
        normed,
        regions: o,
        region_valid: &masks.region_valid,
        valid_a: &masks.valid_a,
        valid_b: &masks.valid_b,
    };
    causal_ehat(g, store, &block.harn, &model.config.switches(), &inputs, mode, rng)
}

/// One pre-norm decoder layer over the spliced `2M × d` block.
pub fn decoder_layer_forward(
    g: &mut Graph,
    model: &Model,
    layer: &LayerParams,
    l: Var,
    o: Var,
    masks: &LayerMasks,
    mode: Mode,
    rng: &RngStream,
) -> Result<(Var, Option<EhatTrace>)> {
    let store = &model.store;
    let p = model.config.dropout;

    let x = layer.norm_self.apply(g, store, l)?;
    let mut r = rng.substream(0);
    let sa = self_attend_language(g, store, &layer.self_attn, x, &masks.self_mask, p, mode, &mut r)?;
    let sa = g.dropout(sa, p, mode, &mut r)?;
    let l = g.add(l, sa)?;

    let x = layer.norm_cross.apply(g, store, l)?;
    let mut r = rng.substream(1);
    let ca = cross_attend(
        g,
        store,
        &layer.cross_attn,
        x,
        o,
        Some(&masks.region_mask),
        p,
        mode,
        &mut r,
    )?;
    let ca = g.dropout(ca, p, mode, &mut r)?;
    let l = g.add(l, ca)?;

    let (l, trace) = match &layer.ehat {
        Some(block) => {
            let (l, t) = run_ehat(g, model, block, l, o, masks, mode, &rng.substream(2))?;
            (l, Some(t))
        }
        None => (l, None),
    };

    let x = layer.norm_ffn.apply(g, store, l)?;
    let f = ffn(g, store, &layer.ffn, x)?;
    let f = g.dropout(f, p, mode, &mut rng.substream(3))?;
    Ok((g.add(l, f)?, trace))
}

pub struct ForwardOutput {
    pub logits_a: Var,
    pub logits_b: Var,
    /// One trace per EHAT block, bottom to top.
    pub traces: Vec<EhatTrace>,
}

fn generator_bias(m: usize, v: usize) -> Tensor {
    let mut t = Tensor::zeros(m, v);
    for r in 0..m {
        t.set(r, PAD, MASK_BIAS);
        t.set(r, BOS, MASK_BIAS);
    }
    t
}

/// Full forward pass over BOS-shifted inputs of equal length `M`.
/// PAD and BOS are never predicted: their logits carry the mask bias.
pub fn forward_teacher_forced(
    g: &mut Graph,
    model: &Model,
    regions: &Tensor,
    inputs_a: &[usize],
    inputs_b: &[usize],
    mode: Mode,
    rng: &RngStream,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let m = inputs_a.len();
    if m == 0 || inputs_b.len() != m {
        return Err(Error::dim(
            "teacher forcing inputs",
            &[inputs_a.len()],
            &[inputs_b.len()],
        ));
    }
    if m > cfg.m_max {
        return Err(Error::contract(format!(
            "sequence length {m} exceeds m_max {}",
            cfg.m_max
        )));
    }
    if inputs_a[0] == PAD || inputs_b[0] == PAD {
        return Err(Error::contract("sequences must start with a real token"));
    }
    if regions.cols() != cfg.d_model || regions.rows() == 0 {
        return Err(Error::dim("regions", regions.shape(), &[0, cfg.d_model]));
    }
    let store = &model.store;
    let o = g.constant(regions.clone())?;
    let ta = g.param(store, model.embed_a)?;
    let tb = g.param(store, model.embed_b)?;
    let ea = embed_and_position(g, ta, inputs_a, 0)?;
    let eb = embed_and_position(g, tb, inputs_b, 0)?;
    let mut l = g.concat_rows(&[ea, eb])?;
    l = g.dropout(l, cfg.dropout, mode, &mut rng.substream(0))?;
    let masks = LayerMasks::new(inputs_a, inputs_b, regions.rows())?;
    let mut traces = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        let (next, trace) = decoder_layer_forward(g, model, layer, l, o, &masks, mode, &rng.substream(1 + i as u64))?;
        l = next;
        traces.extend(trace);
    }
    if let Some(block) = &model.top {
        let (next, trace) = run_ehat(g, model, block, l, o, &masks, mode, &rng.substream(1000))?;
        l = next;
        traces.push(trace);
    }
    let h = model.final_norm.apply(g, store, l)?;
    let mut logits = [None, None];
    for (lang, gen) in [(0, model.gen_a), (1, model.gen_b)] {
        let hl = g.slice_rows(h, lang * m, m)?;
        let w = g.param(store, gen.w)?;
        let b = g.param(store, gen.b)?;
        let y = g.matmul(hl, w)?;
        let y = g.add(y, b)?;
        let y = g.add_const(y, &generator_bias(m, model.vocab_size(lang)))?;
        logits[lang] = Some(y);
    }
    Ok(ForwardOutput {
        logits_a: logits[0].expect("language A logits"),
        logits_b: logits[1].expect("language B logits"),
        traces,
    })
}

/// Teacher-forcing inputs and targets for one caption pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TeacherPair {
    pub inputs_a: Vec<usize>,
    pub targets_a: Vec<usize>,
    pub inputs_b: Vec<usize>,
    pub targets_b: Vec<usize>,
}

impl TeacherPair {
    /// `[BOS, w…, PAD…]` and `[w…, EOS, PAD…]`, both padded to the longer
    /// caption plus one.
    pub fn new(words_a: &[usize], words_b: &[usize]) -> Self {
        let m = words_a.len().max(words_b.len()) + 1;
        let build = |w: &[usize]| {
            let mut inp = vec![BOS];
            inp.extend_from_slice(w);
            inp.resize(m, PAD);
            let mut tgt = w.to_vec();
            tgt.push(EOS);
            tgt.resize(m, PAD);
            (inp, tgt)
        };
        let (inputs_a, targets_a) = build(words_a);
        let (inputs_b, targets_b) = build(words_b);
        TeacherPair {
            inputs_a,
            targets_a,
            inputs_b,
            targets_b,
        }
    }

    /// Replay of a decode: targets are the emitted ids (EOS included, frozen
    /// steps as PAD), inputs the same shifted right behind BOS with EOS
    /// replaced by PAD.
    pub fn from_decode(out: &DecodeOutput) -> Self {
        let shift = |e: &[usize]| {
            let mut inp = vec![BOS];
            inp.extend(
                e.iter()
                    .take(e.len().saturating_sub(1))
                    .map(|&t| if t == EOS { PAD } else { t }),
            );
            inp
        };
        TeacherPair {
            inputs_a: shift(&out.emitted_a),
            targets_a: out.emitted_a.clone(),
            inputs_b: shift(&out.emitted_b),
            targets_b: out.emitted_b.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs_a.is_empty()
    }
}

/// Lockstep decoding state.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecoderState {
    pub emitted_a: Vec<usize>,
    pub emitted_b: Vec<usize>,
    pub finished_a: bool,
    pub finished_b: bool,
    pub t: usize,
}

impl DecoderState {
    fn inputs(e: &[usize]) -> Vec<usize> {
        let mut v = vec![BOS];
        v.extend(e.iter().map(|&t| if t == EOS { PAD } else { t }));
        v
    }

    pub fn inputs_a(&self) -> Vec<usize> {
        Self::inputs(&self.emitted_a)
    }

    pub fn inputs_b(&self) -> Vec<usize> {
        Self::inputs(&self.emitted_b)
    }

    pub fn done(&self) -> bool {
        self.finished_a && self.finished_b
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    /// Step limit; `None` means `m_max`.
    pub max_len: Option<usize>,
    /// `0` picks the argmax.
    pub temperature: f64,
    pub record_attention: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_len: None,
            temperature: 1.0,
            record_attention: false,
        }
    }
}

/// ω and HCA scores at one decoding step for one EHAT block.
#[derive(Clone, Debug, PartialEq)]
pub struct StepAttention {
    pub step: usize,
    pub block: usize,
    pub omega_a: Vec<f64>,
    pub omega_b: Vec<f64>,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    /// Caption ids, EOS excluded.
    pub caption_a: Vec<usize>,
    pub caption_b: Vec<usize>,
    /// Per-step emissions, EOS included and PAD after it.
    pub emitted_a: Vec<usize>,
    pub emitted_b: Vec<usize>,
    /// Log-probability of each emission under the sampling distribution;
    /// 0 on frozen steps.
    pub logp_a: Vec<f64>,
    pub logp_b: Vec<f64>,
    pub attention: Vec<StepAttention>,
}

fn pick(row: &[f64], temperature: f64, rng: Option<&mut RngStream>) -> (usize, f64) {
    let first = EOS;
    let scaled: Vec<f64> = if temperature > 0.0 {
        row[first..].iter().map(|v| v / temperature).collect()
    } else {
        row[first..].to_vec()
    };
    let mut probs = scaled.clone();
    softmax_in_place(&mut probs);
    let greedy = || {
        let mut best = 0;
        for (i, &v) in scaled.iter().enumerate() {
            if v > scaled[best] {
                best = i;
            }
        }
        best
    };
    let choice = match rng {
        Some(rng) if temperature > 0.0 => {
            let u = rng.uniform();
            let mut acc = 0.0;
            let mut idx = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            idx
        }
        _ => greedy(),
    };
    let lp = if temperature > 0.0 {
        let mx = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + math::ln(scaled.iter().map(|v| math::exp(v - mx)).sum::<f64>());
        scaled[choice] - lse
    } else {
        0.0
    };
    (choice + first, lp)
}

fn row_values(t: &Tensor, r: usize) -> Vec<f64> {
    t.row(r).to_vec()
}

fn decode_loop(
    model: &Model,
    regions: &Tensor,
    opts: &DecodeOptions,
    mut rng: Option<&mut RngStream>,
) -> Result<DecodeOutput> {
    let max_len = opts.max_len.unwrap_or(model.config.m_max).min(model.config.m_max);
    let mut st = DecoderState::default();
    let mut out = DecodeOutput {
        caption_a: Vec::new(),
        caption_b: Vec::new(),
        emitted_a: Vec::new(),
        emitted_b: Vec::new(),
        logp_a: Vec::new(),
        logp_b: Vec::new(),
        attention: Vec::new(),
    };
    let fixed = RngStream::new(0);
    while st.t < max_len && !st.done() {
        let mut g = Graph::new();
        let fwd = forward_teacher_forced(
            &mut g,
            model,
            regions,
            &st.inputs_a(),
            &st.inputs_b(),
            Mode::Eval,
            &fixed,
        )?;
        let t = st.t;
        for lang in 0..2 {
            let (logits, finished) = if lang == 0 {
                (fwd.logits_a, st.finished_a)
            } else {
                (fwd.logits_b, st.finished_b)
            };
            let (tok, lp) = if finished {
                (PAD, 0.0)
            } else {
                pick(g.value(logits).row(t), opts.temperature, rng.as_deref_mut())
            };
            if lang == 0 {
                st.emitted_a.push(tok);
                out.logp_a.push(lp);
                st.finished_a |= tok == EOS;
            } else {
                st.emitted_b.push(tok);
                out.logp_b.push(lp);
                st.finished_b |= tok == EOS;
            }
        }
        if opts.record_attention {
            for (block, tr) in fwd.traces.iter().enumerate() {
                let get = |v: &[Var], g: &Graph| v.get(t).map(|&x| g.value(x).data().to_vec()).unwrap_or_default();
                out.attention.push(StepAttention {
                    step: t,
                    block,
                    omega_a: get(&tr.omega_a, &g),
                    omega_b: get(&tr.omega_b, &g),
                    scores_a: tr
                        .scores_a
                        .get(t)
                        .map(|&x| row_values(g.value(x), 0))
                        .unwrap_or_default(),
                    scores_b: tr
                        .scores_b
                        .get(t)
                        .map(|&x| row_values(g.value(x), 0))
                        .unwrap_or_default(),
                });
            }
        }
        st.t += 1;
    }
    let caption = |e: &[usize]| e.iter().copied().take_while(|&t| t != EOS && t != PAD).collect();
    out.caption_a = caption(&st.emitted_a);
    out.caption_b = caption(&st.emitted_b);
    out.emitted_a = st.emitted_a;
    out.emitted_b = st.emitted_b;
    Ok(out)
}

/// Lockstep argmax decoding of both languages.
pub fn greedy_decode(model: &Model, regions: &Tensor, opts: &DecodeOptions) -> Result<DecodeOutput> {
    let opts = DecodeOptions {
        temperature: 0.0,
        ..opts.clone()
    };
    decode_loop(model, regions, &opts, None)
}

/// Lockstep multinomial sampling from the temperature-scaled distribution.
pub fn sample_decode(
    model: &Model,
    regions: &Tensor,
    opts: &DecodeOptions,
    rng: &mut RngStream,
) -> Result<DecodeOutput> {
    decode_loop(model, regions, opts, Some(rng))
}
