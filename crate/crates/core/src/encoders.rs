//! Toy-scale video and text encoders and the projection heads into the
//! shared embedding space.
//!
//! The video encoder splits every frame into non-overlapping `P×P` patches,
//! embeds them linearly, adds learned spatial and temporal position tables and
//! runs `video_blocks` self-attention blocks within each frame. The text
//! encoder embeds tokens, prepends a learned `[CLS]` vector, runs
//! `text_blocks` pad-masked blocks and returns the final `[CLS]` state.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Additive logit for masked keys; `exp` of it underflows to exactly zero.
const MASKED_LOGIT: f64 = -1e9;
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frames: usize,
    pub frame_size: usize,
    pub patch: usize,
    pub d_model: usize,
    pub video_blocks: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub text_len: usize,
    pub d_text: usize,
    pub text_blocks: usize,
    pub d_shared: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            frames: 4,
            frame_size: 32,
            patch: 8,
            d_model: 64,
            video_blocks: 1,
            mlp_hidden: 128,
            vocab: 64,
            text_len: 8,
            d_text: 64,
            text_blocks: 1,
            d_shared: 32,
        }
    }
}

impl EncoderConfig {
    /// Patch grid side `H/P`.
    pub fn grid(&self) -> usize {
        self.frame_size / self.patch
    }

    /// Patches per frame, `L = HW/P²`.
    pub fn patches_per_frame(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_size == 0 || !self.frame_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "frame size {} not divisible by patch size {}",
                self.frame_size, self.patch
            )));
        }
        let positive = [
            ("frames", self.frames),
            ("d_model", self.d_model),
            ("mlp_hidden", self.mlp_hidden),
            ("vocab", self.vocab),
            ("text_len", self.text_len),
            ("d_text", self.d_text),
            ("d_shared", self.d_shared),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        Ok(())
    }
}

/// `B×T×3×H×W` frames with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBatch {
    tensor: Tensor,
}

impl VideoBatch {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 5 || s[2] != 3 {
            return Err(Error::shape(format!("video batch must be B×T×3×H×W, got {s:?}")));
        }
        Ok(Self { tensor })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[4]
    }
}

/// Token ids (`B×L_txt`, row-major) with a parallel pad mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub token_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TextBatch {
    pub fn new(token_ids: Vec<usize>, pad_mask: Vec<bool>, batch: usize, len: usize) -> Result<Self> {
        if token_ids.len() != batch * len || pad_mask.len() != batch * len || batch == 0 || len == 0 {
            return Err(Error::shape(format!(
                "text batch {batch}×{len} with {} ids and {} mask entries",
                token_ids.len(),
                pad_mask.len()
            )));
        }
        if let Some(row) = pad_mask.chunks(len).position(|r| r.iter().all(|&p| p)) {
            return Err(Error::invalid(format!("caption {row} has no non-pad token")));
        }
        Ok(Self { token_ids, pad_mask, batch, len })
    }
}

/// One pre-activation-free transformer block: `h = x + Attn(x)`,
/// `y = h + W2·gelu(W1·h + b1) + b2`. Single head.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl BlockParams {
    fn init<R: Rng>(prefix: &str, d: usize, hidden: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let mut w = |name: &str, shape: &[usize], std: f64, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Tensor::randn(shape, std, rng))
        };
        let wq = w("wq", &[d, d], std, rng);
        let wk = w("wk", &[d, d], std, rng);
        let wv = w("wv", &[d, d], std, rng);
        let wo = w("wo", &[d, d], std, rng);
        let w1 = w("w1", &[d, hidden], std, rng);
        let w2 = w("w2", &[hidden, d], 1.0 / (hidden as f64).sqrt(), rng);
        let b1 = store.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]));
        let b2 = store.add(format!("{prefix}.b2"), Tensor::zeros(&[d]));
        Self { wq, wk, wv, wo, w1, b1, w2, b2 }
    }

    fn ids(&self) -> [ParamId; 8] {
        [self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2]
    }

    /// `x: N×S×d`; `mask`, when given, is an additive `N×S×S` logit offset.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mask: Option<Var>) -> Result<Var> {
        let d = *tape.shape(x).last().expect("rank ≥ 1");
        let q = tape.matmul(x, bound[self.wq])?;
        let k = tape.matmul(x, bound[self.wk])?;
        let v = tape.matmul(x, bound[self.wv])?;
        let logits = tape.matmul_nt(q, k)?;
        let mut logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        if let Some(m) = mask {
            logits = tape.add(logits, m)?;
        }
        let attn = tape.softmax(logits, 2)?;
        let mixed = tape.matmul(attn, v)?;
        let o = tape.matmul(mixed, bound[self.wo])?;
        let h = tape.add(x, o)?;
        let u = tape.matmul(h, bound[self.w1])?;
        let u = tape.add_suffix(u, bound[self.b1])?;
        let u = tape.gelu(u);
        let m = tape.matmul(u, bound[self.w2])?;
        let m = tape.add_suffix(m, bound[self.b2])?;
        tape.add(h, m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Video,
    Text,
}

/// Handles of every encoder parameter inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub pos_spatial: ParamId,
    pub pos_temporal: ParamId,
    pub video_blocks: Vec<BlockParams>,
    pub token_embedding: ParamId,
    pub cls: ParamId,
    pub text_blocks: Vec<BlockParams>,
    pub video_proj_w: ParamId,
    pub video_proj_b: ParamId,
    pub text_proj_w: ParamId,
    pub text_proj_b: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng>(config: &EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let patch_dim = 3 * c.patch * c.patch;
        let patch_w = store.add("video.patch_w", Tensor::randn(&[patch_dim, c.d_model], 1.0 / (patch_dim as f64).sqrt(), rng));
        let patch_b = store.add("video.patch_b", Tensor::zeros(&[c.d_model]));
        let pos_spatial = store.add("video.pos_spatial", Tensor::randn(&[c.patches_per_frame(), c.d_model], 0.1, rng));
        let pos_temporal = store.add("video.pos_temporal", Tensor::randn(&[c.frames, c.d_model], 0.1, rng));
        let video_blocks = (0..c.video_blocks)
            .map(|i| BlockParams::init(&format!("video.block{i}"), c.d_model, c.mlp_hidden, store, rng))
            .collect();
        let token_embedding = store.add("text.token_embedding", Tensor::randn(&[c.vocab, c.d_text], 0.5, rng));
        let cls = store.add("text.cls", Tensor::randn(&[1, c.d_text], 0.5, rng));
        let text_blocks = (0..c.text_blocks)
            .map(|i| BlockParams::init(&format!("text.block{i}"), c.d_text, c.mlp_hidden, store, rng))
            .collect();
        let video_proj_w =
            store.add("video.proj_w", Tensor::randn(&[c.d_model, c.d_shared], 1.0 / (c.d_model as f64).sqrt(), rng));
        let video_proj_b = store.add("video.proj_b", Tensor::zeros(&[c.d_shared]));
        let text_proj_w =
            store.add("text.proj_w", Tensor::randn(&[c.d_text, c.d_shared], 1.0 / (c.d_text as f64).sqrt(), rng));
        let text_proj_b = store.add("text.proj_b", Tensor::zeros(&[c.d_shared]));
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b,
            pos_spatial,
            pos_temporal,
            video_blocks,
            token_embedding,
            cls,
            text_blocks,
            video_proj_w,
            video_proj_b,
            text_proj_w,
            text_proj_b,
        })
    }

    /// Every parameter id owned by the video path up to (not including) the
    /// projection head.
    pub fn video_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.patch_w, self.patch_b, self.pos_spatial, self.pos_temporal];
        ids.extend(self.video_blocks.iter().flat_map(BlockParams::ids));
        ids
    }

    pub fn text_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.cls];
        ids.extend(self.text_blocks.iter().flat_map(BlockParams::ids));
        ids
    }
}

/// Rearranges `B×T×3×H×W` frames into `(B·T·L)×(3·P·P)` patch rows. Patches
/// are row-major over the grid; inside a patch the order is channel, row,
/// column.
pub fn patchify(video: &VideoBatch, patch: usize) -> Result<Tensor> {
    let (b, t, h, w) = (video.batch(), video.frames(), video.height(), video.width());
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("frame {h}×{w} not divisible by patch size {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let v = video.tensor().values();
    let dim = 3 * patch * patch;
    let mut out = Vec::with_capacity(b * t * gh * gw * dim);
    for bt in 0..b * t {
        for gy in 0..gh {
            for gx in 0..gw {
                for c in 0..3 {
                    for py in 0..patch {
                        let row = ((bt * 3 + c) * h + gy * patch + py) * w + gx * patch;
                        out.extend_from_slice(&v[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[b * t * gh * gw, dim], out)
}

/// Patch features `F`: `B×T×L×d`.
pub fn encode_video(tape: &mut Tape, bound: &Bound, p: &EncoderParams, video: &VideoBatch) -> Result<Var> {
    let c = &p.config;
    let (b, t) = (video.batch(), video.frames());
    if video.height() != c.frame_size || video.width() != c.frame_size {
        return Err(Error::shape(format!(
            "video frames {}×{} do not match configured {}",
            video.height(),
            video.width(),
            c.frame_size
        )));
    }
    if t != c.frames {
        return Err(Error::shape(format!("video has {t} frames, configured for {}", c.frames)));
    }
    let l = c.patches_per_frame();
    let patches = tape.constant(patchify(video, c.patch)?);
    let x = tape.matmul(patches, bound[p.patch_w])?;
    let x = tape.add_suffix(x, bound[p.patch_b])?;

    let spatial_ids: Vec<usize> = (0..t).flat_map(|_| 0..l).collect();
    let temporal_ids: Vec<usize> = (0..t).flat_map(|ti| std::iter::repeat_n(ti, l)).collect();
    let ps = tape.embedding(bound[p.pos_spatial], &spatial_ids)?;
    let pt = tape.embedding(bound[p.pos_temporal], &temporal_ids)?;
    let pos = tape.add(ps, pt)?;
    let pos = tape.reshape(pos, &[t, l, c.d_model])?;

    let x = tape.reshape(x, &[b, t, l, c.d_model])?;
    let x = tape.add_suffix(x, pos)?;
    let mut x = tape.reshape(x, &[b * t, l, c.d_model])?;
    for blk in &p.video_blocks {
        x = blk.forward(tape, bound, x, None)?;
    }
    tape.reshape(x, &[b, t, l, c.d_model])
}

/// Final `[CLS]` hidden state: `B×d_txt`.
pub fn encode_text(tape: &mut Tape, bound: &Bound, p: &EncoderParams, text: &TextBatch) -> Result<Var> {
    let c = &p.config;
    if let Some(&bad) = text.token_ids.iter().find(|&&id| id >= c.vocab) {
        return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", c.vocab)));
    }
    let (b, l, d) = (text.batch, text.len, c.d_text);
    let tok = tape.embedding(bound[p.token_embedding], &text.token_ids)?;
    let tok = tape.reshape(tok, &[b, l, d])?;
    let cls = tape.embedding(bound[p.cls], &vec![0; b])?;
    let cls = tape.reshape(cls, &[b, 1, d])?;
    let mut x = tape.concat(&[cls, tok], 1)?;

    let s = l + 1;
    let mut mask = Tensor::zeros(&[b, s, s]);
    for bi in 0..b {
        for j in 0..l {
            if text.pad_mask[bi * l + j] {
                for i in 0..s {
                    mask.set(&[bi, i, j + 1], MASKED_LOGIT);
                }
            }
        }
    }
    let mask = tape.constant(mask);
    for blk in &p.text_blocks {
        x = blk.forward(tape, bound, x, Some(mask))?;
    }
    let first = tape.slice(x, 1, 0, 1)?;
    tape.reshape(first, &[b, d])
}

/// Affine map into the shared space followed by unit-norm scaling of the
/// last axis.
pub fn project_shared(tape: &mut Tape, bound: &Bound, p: &EncoderParams, x: Var, modality: Modality) -> Result<Var> {
    let (w, b) = match modality {
        Modality::Video => (p.video_proj_w, p.video_proj_b),
        Modality::Text => (p.text_proj_w, p.text_proj_b),
    };
    let y = project_with(tape, bound[w], bound[b], x)?;
    Ok(y)
}

pub(crate) fn project_with(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d_in = *shape.last().ok_or_else(|| Error::shape("projection of a scalar"))?;
    if tape.shape(w)[0] != d_in {
        return Err(Error::shape(format!("projection expects {} inputs, got {shape:?}", tape.shape(w)[0])));
    }
    let lead: usize = shape[..shape.len() - 1].iter().product();
    let flat = tape.reshape(x, &[lead.max(1), d_in])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add_suffix(y, b)?;
    let y = tape.l2_normalize(y, 1, NORM_EPS)?;
    let mut out_shape = shape[..shape.len() - 1].to_vec();
    out_shape.push(tape.shape(w)[1]);
    tape.reshape(y, &out_shape)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(cfg: &EncoderConfig, seed: u64) -> (ParamStore, EncoderParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = EncoderParams::init(cfg, &mut store, &mut rng).unwrap();
        (store, p)
    }

    fn random_video(b: usize, cfg: &EncoderConfig, seed: u64) -> VideoBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = cfg.frame_size;
        VideoBatch::new(Tensor::uniform(&[b, cfg.frames, 3, s, s], 0.0, 1.0, &mut rng)).unwrap()
    }

    fn caption(rows: &[&[usize]], len: usize) -> TextBatch {
        let mut ids = Vec::new();
        let mut pad = Vec::new();
        for r in rows {
            for j in 0..len {
                ids.push(r.get(j).copied().unwrap_or(0));
                pad.push(j >= r.len());
            }
        }
        TextBatch::new(ids, pad, rows.len(), len).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let paper = EncoderConfig { frame_size: 224, patch: 16, ..Default::default() };
        assert_eq!(paper.patches_per_frame(), 196);
        assert_eq!(EncoderConfig::default().patches_per_frame(), 16);
        let bad = EncoderConfig { frame_size: 30, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn video_output_shape() {
        let cfg = EncoderConfig { d_model: 16, mlp_hidden: 8, ..Default::default() };
        let (store, p) = setup(&cfg, 1);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = encode_video(&mut tape, &bound, &p, &random_video(2, &cfg, 2)).unwrap();
        assert_eq!(tape.shape(f), &[2, 4, 16, 16]);
    }

    #[test]
    fn zero_video_yields_patch_bias() {
        let cfg = EncoderConfig { d_model: 8, video_blocks: 0, ..Default::default() };
        let (mut store, p) = setup(&cfg, 3);
        *store.get_mut(p.pos_spatial) = Tensor::zeros(store.get(p.pos_spatial).shape());
        *store.get_mut(p.pos_temporal) = Tensor::zeros(store.get(p.pos_temporal).shape());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        *store.get_mut(p.patch_b) = Tensor::randn(&[8], 1.0, &mut rng);
        let bias = store.get(p.patch_b).values().to_vec();
        let video = VideoBatch::new(Tensor::zeros(&[1, 4, 3, 32, 32])).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let f = encode_video(&mut tape, &bound, &p, &video).unwrap();
        for row in tape.value(f).values().chunks(8) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn indivisible_frame_rejected() {
        let video = VideoBatch::new(Tensor::zeros(&[1, 1, 3, 30, 30])).unwrap();
        assert!(patchify(&video, 8).is_err());
    }

    #[test]
    fn patch_order_is_row_major_grid() {
        // tag every pixel of patch (gy, gx) with gy*4+gx
        let mut t = Tensor::zeros(&[1, 1, 3, 32, 32]);
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    t.set(&[0, 0, c, y, x], ((y / 8) * 4 + x / 8) as f64);
                }
            }
        }
        let p = patchify(&VideoBatch::new(t).unwrap(), 8).unwrap();
        for (i, row) in p.values().chunks(192).enumerate() {
            assert!(row.iter().all(|&v| v == i as f64));
        }
    }

    #[test]
    fn identical_captions_identical_outputs_and_pads_ignored() {
        let cfg = EncoderConfig { d_text: 16, mlp_hidden: 16, ..Default::default() };
        let (store, p) = setup(&cfg, 5);
        let run = |text: &TextBatch| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let y = encode_text(&mut tape, &bound, &p, text).unwrap();
            tape.value(y).clone()
        };
        let a = run(&caption(&[&[1, 3, 7, 11, 2], &[1, 3, 7, 11, 2]], 8));
        let (r0, r1) = a.values().split_at(16);
        assert_eq!(r0, r1);

        let short = run(&caption(&[&[1, 3, 7, 11, 2]], 5));
        let padded = run(&caption(&[&[1, 3, 7, 11, 2]], 12));
        assert!(short.max_abs_diff(&padded) < 1e-6);

        let other = run(&caption(&[&[1, 4, 7, 11, 2]], 8));
        assert!(other.max_abs_diff(&Tensor::new(&[1, 16], r0.to_vec()).unwrap()) > 1e-3);
    }

    #[test]
    fn zero_blocks_return_cls_embedding() {
        let cfg = EncoderConfig { d_text: 8, mlp_hidden: 8, ..Default::default() };
        let (mut store, p) = setup(&cfg, 6);
        for id in p.text_ids().into_iter().skip(2) {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let cls = store.get(p.cls).values().to_vec();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let y = encode_text(&mut tape, &bound, &p, &caption(&[&[5]], 1)).unwrap();
        assert_eq!(tape.value(y).values(), cls.as_slice());
    }

    #[test]
    fn out_of_vocabulary_rejected() {
        let cfg = EncoderConfig { d_text: 8, mlp_hidden: 8, ..Default::default() };
        let (store, p) = setup(&cfg, 7);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let text = caption(&[&[1, 64]], 2);
        assert!(matches!(encode_text(&mut tape, &bound, &p, &text), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn all_pad_caption_rejected() {
        assert!(TextBatch::new(vec![0, 0], vec![true, true], 1, 2).is_err());
    }

    #[test]
    fn projection_identity_and_hand_value() {
        let cfg = EncoderConfig { d_model: 2, d_text: 2, d_shared: 2, mlp_hidden: 2, ..Default::default() };
        let (mut store, p) = setup(&cfg, 8);
        *store.get_mut(p.video_proj_w) = Tensor::eye(2);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap());
        let y = project_shared(&mut tape, &bound, &p, x, Modality::Video).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.0, 1.0]);

        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(project_shared(&mut tape, &bound, &p, bad, Modality::Text).is_err());
    }

    #[test]
    fn batch_permutation_commutes() {
        let cfg = EncoderConfig { d_model: 8, mlp_hidden: 8, ..Default::default() };
        let (store, p) = setup(&cfg, 9);
        let v = random_video(3, &cfg, 10);
        let s = v.tensor().shape().to_vec();
        let per = v.tensor().len() / 3;
        let vals = v.tensor().values();
        let perm = [2, 0, 1];
        let permuted: Vec<f64> = perm.iter().flat_map(|&i| vals[i * per..(i + 1) * per].to_vec()).collect();
        let pv = VideoBatch::new(Tensor::new(&s, permuted).unwrap()).unwrap();
        let run = |v: &VideoBatch| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let f = encode_video(&mut tape, &bound, &p, v).unwrap();
            tape.value(f).clone()
        };
        let (a, b) = (run(&v), run(&pv));
        let out_per = a.len() / 3;
        for (k, &i) in perm.iter().enumerate() {
            let ra = &a.values()[i * out_per..(i + 1) * out_per];
            let rb = &b.values()[k * out_per..(k + 1) * out_per];
            assert!(ra.iter().zip(rb).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }
}
