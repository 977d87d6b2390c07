//! Clip encoder: frame encoder → [CLS]+positional tokens → pre-norm
//! self-attention blocks → (z, f_1..f_T); z feeds a two-layer tanh hash head
//! and each f_j feeds a linear order head.

mod config;
mod state;

pub use config::{EncoderConfig, FrameEncoderKind, TemporalEncoderKind};
pub use state::{ModelState, Param};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::augment::ClipView;
use crate::autograd::{ImageGeom, Tape, Var};
use crate::corpus::FeatureSequence;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// A batch of N clips with T rows each, stacked clip-major.
#[derive(Debug, Clone, PartialEq)]
pub enum ClipBatch {
    /// (N·T)×D feature rows.
    Features(Array2<f64>),
    /// (N·T)×(C·H·W) flattened frames.
    Frames(Array2<f64>),
}

impl ClipBatch {
    pub fn from_views<'a>(views: impl IntoIterator<Item = &'a ClipView>) -> Result<Self> {
        let mut feature_rows: Vec<Array2<f64>> = Vec::new();
        let mut frame_rows: Vec<Array2<f64>> = Vec::new();
        for v in views {
            match v {
                ClipView::Features(f) => feature_rows.push(f.0.mapv(f64::from)),
                ClipView::Frames(f) => {
                    let t = f.len();
                    let flat = f.0.mapv(f64::from);
                    let cols = flat.len() / t.max(1);
                    frame_rows.push(flat.into_shape_with_order((t, cols)).expect("contiguous"));
                }
            }
        }
        let stack = |parts: Vec<Array2<f64>>| -> Result<Array2<f64>> {
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::Argument(format!("inconsistent clip shapes: {e}")))
        };
        match (feature_rows.is_empty(), frame_rows.is_empty()) {
            (false, true) => Ok(ClipBatch::Features(stack(feature_rows)?)),
            (true, false) => Ok(ClipBatch::Frames(stack(frame_rows)?)),
            (true, true) => Err(Error::Argument("empty clip batch".into())),
            (false, false) => Err(Error::Argument("batch mixes frames and features".into())),
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            ClipBatch::Features(a) | ClipBatch::Frames(a) => a.nrows(),
        }
    }
}

/// Tape vars for every parameter, looked up by name.
pub struct Bound<'a> {
    state: &'a ModelState,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &mut Tape, state: &'a ModelState) -> Self {
        let vars = state
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect();
        Self { state, vars }
    }

    fn p(&self, name: &str) -> Var {
        let i = self
            .state
            .index_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

fn frame_encode_on(tape: &mut Tape, bound: &Bound, input: &ClipBatch) -> Result<Var> {
    let cfg = &bound.state.config;
    match (&cfg.frame_encoder, input) {
        (FrameEncoderKind::Identity, ClipBatch::Features(x)) => {
            if x.ncols() != cfg.frame_dim {
                return Err(Error::Argument(format!(
                    "feature width {} does not match frame_dim {}",
                    x.ncols(),
                    cfg.frame_dim
                )));
            }
            Ok(tape.leaf(x.clone()))
        }
        (FrameEncoderKind::ToyCnn { geometry, widths }, ClipBatch::Frames(x)) => {
            if x.ncols() != geometry.pixels() {
                return Err(Error::Argument(format!(
                    "frame size {} does not match configured {:?}",
                    x.ncols(),
                    geometry
                )));
            }
            let mut geom = ImageGeom {
                channels: geometry.channels,
                height: geometry.height,
                width: geometry.width,
            };
            let mut h = tape.leaf(x.clone());
            let chans = [widths[0], widths[1], cfg.frame_dim];
            for (i, &c) in chans.iter().enumerate() {
                let w = bound.p(&format!("cnn.conv{}.weight", i + 1));
                let b = bound.p(&format!("cnn.conv{}.bias", i + 1));
                h = tape.conv3x3(h, w, b, geom);
                h = tape.relu(h);
                geom.channels = c;
                h = tape.avg_pool2(h, geom);
                geom = geom.pooled();
            }
            Ok(tape.global_avg_pool(h, geom))
        }
        (FrameEncoderKind::Identity, ClipBatch::Frames(_)) => Err(Error::Argument(
            "raw frames given to a feature-mode encoder".into(),
        )),
        (FrameEncoderKind::ToyCnn { .. }, ClipBatch::Features(_)) => Err(Error::Argument(
            "features given to a raw-frame encoder".into(),
        )),
    }
}

/// Returns (z: N×d, f: (N·T)×d) for (N·T)×D frame features.
fn temporal_encode_on(tape: &mut Tape, bound: &Bound, features: Var) -> (Var, Var) {
    let cfg = &bound.state.config;
    let t = cfg.clip_length;
    let seq = t + 1;
    let n = tape.value(features).nrows() / t;
    let x = tape.linear(features, bound.p("input.weight"), bound.p("input.bias"));
    let mut x = tape.prepend_cls(bound.p("cls"), x, bound.p("pos"), t);
    match cfg.temporal_encoder {
        TemporalEncoderKind::Attention => {
            for l in 0..cfg.num_layers {
                let p = |s: &str| bound.p(&format!("layers.{l}.{s}"));
                let a = tape.layer_norm(x, p("ln1.gamma"), p("ln1.beta"), LN_EPS);
                let q = tape.linear(a, p("attn.q.weight"), p("attn.q.bias"));
                let k = tape.linear(a, p("attn.k.weight"), p("attn.k.bias"));
                let v = tape.linear(a, p("attn.v.weight"), p("attn.v.bias"));
                let att = tape.attention(q, k, v, seq, cfg.num_heads);
                let o = tape.linear(att, p("attn.out.weight"), p("attn.out.bias"));
                x = tape.add(x, o);
                let m = tape.layer_norm(x, p("ln2.gamma"), p("ln2.beta"), LN_EPS);
                let hdn = tape.linear(m, p("ffn.fc1.weight"), p("ffn.fc1.bias"));
                let hdn = tape.relu(hdn);
                let ffn = tape.linear(hdn, p("ffn.fc2.weight"), p("ffn.fc2.bias"));
                x = tape.add(x, ffn);
            }
        }
    }
    let cls_rows = (0..n).map(|i| i * seq).collect();
    let frame_rows = (0..n)
        .flat_map(|i| (1..seq).map(move |j| i * seq + j))
        .collect();
    let z = tape.gather_rows(x, cls_rows);
    let f = tape.gather_rows(x, frame_rows);
    (z, f)
}

fn hash_project_on(tape: &mut Tape, bound: &Bound, z: Var) -> Var {
    let h = tape.linear(z, bound.p("hash.fc1.weight"), bound.p("hash.fc1.bias"));
    let h = tape.relu(h);
    let h = tape.linear(h, bound.p("hash.fc2.weight"), bound.p("hash.fc2.bias"));
    tape.tanh(h)
}

fn order_logits_on(tape: &mut Tape, bound: &Bound, f: Var) -> Var {
    tape.linear(f, bound.p("order.weight"), bound.p("order.bias"))
}

/// All intermediate handles of one forward pass over a clip batch.
pub struct ForwardPass {
    pub tape: Tape,
    pub params: Vec<Var>,
    pub num_clips: usize,
    pub z: Var,
    pub frames: Var,
    pub h: Var,
    pub b: Var,
    pub order_logits: Var,
}

impl ForwardPass {
    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.tape.value(v)
    }
}

fn ensure_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in {what}")))
    }
}

pub fn forward(state: &ModelState, input: &ClipBatch) -> Result<ForwardPass> {
    let t = state.config.clip_length;
    if input.rows() == 0 || !input.rows().is_multiple_of(t) {
        return Err(Error::Argument(format!(
            "batch has {} rows, not a positive multiple of clip length {t}",
            input.rows()
        )));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let features = frame_encode_on(&mut tape, &bound, input)?;
    ensure_finite(&tape, features, "frame features")?;
    let (z, frames) = temporal_encode_on(&mut tape, &bound, features);
    ensure_finite(&tape, z, "clip representation")?;
    ensure_finite(&tape, frames, "frame representations")?;
    let h = hash_project_on(&mut tape, &bound, z);
    let b = tape.sign_ste(h);
    let order_logits = order_logits_on(&mut tape, &bound, frames);
    let params = bound.vars;
    Ok(ForwardPass {
        tape,
        params,
        num_clips: input.rows() / t,
        z,
        frames,
        h,
        b,
        order_logits,
    })
}

/// Maps one clip to T×D frame features. Identity in feature mode.
pub fn frame_encode(state: &ModelState, clip: &ClipView) -> Result<FeatureSequence> {
    if let (FrameEncoderKind::Identity, ClipView::Features(f)) = (&state.config.frame_encoder, clip)
    {
        if f.dim() != state.config.frame_dim {
            return Err(Error::Argument("feature width mismatch".into()));
        }
        return Ok(f.clone());
    }
    let batch = ClipBatch::from_views([clip])?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let out = frame_encode_on(&mut tape, &bound, &batch)?;
    FeatureSequence::new(tape.value(out).mapv(|v| v as f32))
}

/// Runs the frame encoder on many frames at once (rows of C·H·W pixels).
pub fn frame_encode_rows(state: &ModelState, frames: Array2<f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let out = frame_encode_on(&mut tape, &bound, &ClipBatch::Frames(frames))?;
    Ok(tape.value(out).clone())
}

/// Returns the CLS representation z (d) and frame representations f (T×d).
pub fn temporal_encode(
    state: &ModelState,
    features: &FeatureSequence,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let t = state.config.clip_length;
    if features.len() != t || features.dim() != state.config.frame_dim {
        return Err(Error::Argument(format!(
            "expected {t}x{} features, got {}x{}",
            state.config.frame_dim,
            features.len(),
            features.dim()
        )));
    }
    if features.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input features".into()));
    }
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let x = tape.leaf(features.0.mapv(f64::from));
    let (z, f) = temporal_encode_on(&mut tape, &bound, x);
    ensure_finite(&tape, z, "clip representation")?;
    ensure_finite(&tape, f, "frame representations")?;
    Ok((tape.value(z).row(0).to_owned(), tape.value(f).clone()))
}

pub fn hash_project(state: &ModelState, z: ArrayView1<f64>) -> Array1<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let zv = tape.leaf(z.to_owned().insert_axis(Axis(0)));
    let h = hash_project_on(&mut tape, &bound, zv);
    tape.value(h).row(0).to_owned()
}

/// Forward half of the straight-through binarizer: sign with ties to +1.
pub fn binarize(h: ArrayView1<f64>) -> Array1<f64> {
    h.mapv(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

pub fn order_logits(state: &ModelState, f: ArrayView2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, state);
    let fv = tape.leaf(f.to_owned());
    let l = order_logits_on(&mut tape, &bound, fv);
    tape.value(l).clone()
}

/// Binary codes (N×K, entries ±1) for a list of clips, encoded in chunks.
pub fn encode_codes(state: &ModelState, clips: &[ClipView], chunk: usize) -> Result<Array2<f64>> {
    let mut parts = Vec::new();
    for c in clips.chunks(chunk.max(1)) {
        let batch = ClipBatch::from_views(c)?;
        let pass = forward(state, &batch)?;
        parts.push(pass.value(pass.b).clone());
    }
    if parts.is_empty() {
        return Ok(Array2::zeros((0, state.config.code_bits)));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("same code width"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{FrameGeometry, FrameSequence};
    use ndarray::{array, Array4};
    use rand::Rng as _;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            frame_dim: 5,
            model_dim: 4,
            ffn_dim: 6,
            hash_hidden: 4,
            clip_length: 3,
            code_bits: 3,
            ..EncoderConfig::default()
        }
    }

    fn rand_features(t: usize, d: usize, seed: u64) -> FeatureSequence {
        let mut r = crate::rng::rng_for(seed, &[]);
        FeatureSequence(Array2::from_shape_fn((t, d), |_| {
            r.random_range(-1.0f32..1.0)
        }))
    }

    #[test]
    fn feature_mode_frame_encode_is_identity() {
        let s = ModelState::init(small_cfg(), 0).unwrap();
        let f = rand_features(3, 5, 1);
        assert_eq!(frame_encode(&s, &ClipView::Features(f.clone())).unwrap(), f);
    }

    #[test]
    fn toy_cnn_on_zero_frames_repeats_one_vector() {
        let cfg = EncoderConfig {
            frame_encoder: FrameEncoderKind::ToyCnn {
                geometry: FrameGeometry::new(3, 8, 8),
                widths: [4, 4],
            },
            frame_dim: 6,
            clip_length: 25,
            ..EncoderConfig::default()
        };
        let mut s = ModelState::init(cfg, 2).unwrap();
        for i in 1..=3 {
            s.get_mut(&format!("cnn.conv{i}.bias")).unwrap().fill(0.1);
        }
        let clip = ClipView::Frames(FrameSequence(Array4::zeros((25, 3, 8, 8))));
        let out = frame_encode(&s, &clip).unwrap();
        assert_eq!(out.0.dim(), (25, 6));
        for t in 1..25 {
            assert_eq!(out.0.row(t), out.0.row(0));
        }
    }

    #[test]
    fn frames_into_feature_encoder_rejected() {
        let s = ModelState::init(small_cfg(), 0).unwrap();
        let clip = ClipView::Frames(FrameSequence(Array4::zeros((3, 1, 8, 8))));
        assert!(matches!(frame_encode(&s, &clip), Err(Error::Argument(_))));
    }

    #[test]
    fn temporal_shapes() {
        let s = ModelState::init(small_cfg(), 0).unwrap();
        let (z, f) = temporal_encode(&s, &rand_features(3, 5, 2)).unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(f.dim(), (3, 4));
        assert!(temporal_encode(&s, &rand_features(4, 5, 2)).is_err());
    }

    #[test]
    fn joint_frame_and_position_permutation_is_equivariant() {
        let cfg = small_cfg();
        let s = ModelState::init(cfg, 5).unwrap();
        let feats = rand_features(3, 5, 3);
        let perm = [2usize, 0, 1];
        let mut sp = s.clone();
        let pos = s.get("pos").unwrap().clone();
        {
            let p = sp.get_mut("pos").unwrap();
            for (j, &src) in perm.iter().enumerate() {
                p.row_mut(j + 1).assign(&pos.row(src + 1));
            }
        }
        let permuted = FeatureSequence(feats.0.select(Axis(0), &perm));
        let (z, f) = temporal_encode(&s, &feats).unwrap();
        let (zp, fp) = temporal_encode(&sp, &permuted).unwrap();
        for (a, b) in z.iter().zip(zp.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (j, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((fp[[j, c]] - f[[src, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_only_path_when_mixing_projections_are_zero() {
        // 2 frames, d = 4: with V, attention-out and FFN-out zeroed the block
        // is the identity, so z = cls + pos[0] exactly.
        let cfg = EncoderConfig {
            frame_dim: 3,
            model_dim: 4,
            clip_length: 2,
            ..small_cfg()
        };
        let mut s = ModelState::init(cfg, 9).unwrap();
        for name in [
            "layers.0.attn.v.weight",
            "layers.0.attn.v.bias",
            "layers.0.attn.out.weight",
            "layers.0.attn.out.bias",
            "layers.0.ffn.fc2.weight",
            "layers.0.ffn.fc2.bias",
        ] {
            s.get_mut(name).unwrap().fill(0.0);
        }
        *s.get_mut("cls").unwrap() = array![[0.5, -1.0, 0.25, 2.0]];
        *s.get_mut("pos").unwrap() = array![
            [0.1, 0.2, 0.3, 0.4],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0]
        ];
        let (z, _) = temporal_encode(&s, &rand_features(2, 3, 4)).unwrap();
        let expected = [0.6, -0.8, 0.55, 2.4];
        for (a, b) in z.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn hash_head_range_and_zero_weights() {
        let mut s = ModelState::init(small_cfg(), 1).unwrap();
        let z = array![3.0, -2.0, 10.0, 0.5];
        assert!(hash_project(&s, z.view()).iter().all(|v| v.abs() < 1.0));
        // doubling the final pre-activation pushes every |h_k| towards 1
        let before = hash_project(&s, z.view());
        s.get_mut("hash.fc2.weight")
            .unwrap()
            .mapv_inplace(|v| 2.0 * v);
        s.get_mut("hash.fc2.bias")
            .unwrap()
            .mapv_inplace(|v| 2.0 * v);
        let after = hash_project(&s, z.view());
        for (a, b) in before.iter().zip(after.iter()) {
            assert!(b.abs() >= a.abs());
        }
        for name in [
            "hash.fc1.weight",
            "hash.fc1.bias",
            "hash.fc2.weight",
            "hash.fc2.bias",
        ] {
            s.get_mut(name).unwrap().fill(0.0);
        }
        assert_eq!(hash_project(&s, z.view()), Array1::<f64>::zeros(3));
    }

    #[test]
    fn binarize_signs_with_positive_ties() {
        assert_eq!(binarize(array![0.3, -0.7].view()), array![1.0, -1.0]);
        assert_eq!(binarize(Array1::zeros(4).view()), Array1::from_elem(4, 1.0));
    }

    #[test]
    fn order_head_cases() {
        let cfg = EncoderConfig {
            model_dim: 4,
            clip_length: 4,
            ..small_cfg()
        };
        let mut s = ModelState::init(cfg, 0).unwrap();
        s.get_mut("order.weight").unwrap().fill(0.0);
        *s.get_mut("order.bias").unwrap() = array![[0.7, 0.7, 0.7, 0.7]];
        let f = array![[1.0, 2.0, 3.0, 4.0]];
        let logits = order_logits(&s, f.view());
        assert_eq!(logits.dim(), (1, 4));
        assert!(logits.iter().all(|&v| v == 0.7));
        *s.get_mut("order.weight").unwrap() = Array2::eye(4);
        s.get_mut("order.bias").unwrap().fill(0.0);
        for hot in 0..4 {
            let mut f = Array2::zeros((1, 4));
            f[[0, hot]] = 1.0;
            let l = order_logits(&s, f.view());
            let arg = l
                .row(0)
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(arg, hot);
        }
    }

    #[test]
    fn forward_rejects_ragged_batch() {
        let s = ModelState::init(small_cfg(), 0).unwrap();
        assert!(forward(&s, &ClipBatch::Features(Array2::zeros((4, 5)))).is_err());
    }
}
