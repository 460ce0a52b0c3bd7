//! Three-stage convolutional encoder fused to a stride-4 feature map.
//!
//! Stages run at strides 4, 8 and 16 with `c`, `2c` and `4c` channels. Each
//! stage is projected by a 1×1 convolution to `d/2`, `d/4` and `d/4`
//! channels, the coarse stages are bilinearly upsampled to stride 4, and the
//! concatenation is fused by a final 1×1 convolution to `d` channels.

use crate::nn::{Builder, Conv};
use crate::params::ParamVars;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::Error;

pub const STRIDE: usize = 4;

/// Encoder output for one frame: `o` is `[d, H/4, W/4]` on the tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub o: Var,
    pub d: usize,
    pub height: usize,
    pub width: usize,
    pub frame: usize,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    down1: Conv,
    stage1: Conv,
    stage2: Conv,
    stage3: Conv,
    proj1: Conv,
    proj2: Conv,
    proj3: Conv,
    fuse: Conv,
    pub d: usize,
}

impl Encoder {
    pub fn new<F: Real>(bld: &mut Builder<F>, c: usize, d: usize) -> Result<Self, Error> {
        if !d.is_multiple_of(4) || d == 0 || c == 0 {
            return Err(Error::Config(format!("encoder needs d divisible by 4 and c > 0 (d={d}, c={c})")));
        }
        Ok(Self {
            stem: Conv::new(bld, "enc.stem", 3, c, 3, 2),
            down1: Conv::new(bld, "enc.down1", c, c, 3, 2),
            stage1: Conv::new(bld, "enc.stage1", c, c, 3, 1),
            stage2: Conv::new(bld, "enc.stage2", c, 2 * c, 3, 2),
            stage3: Conv::new(bld, "enc.stage3", 2 * c, 4 * c, 3, 2),
            proj1: Conv::new(bld, "enc.proj1", c, d / 2, 1, 1),
            proj2: Conv::new(bld, "enc.proj2", 2 * c, d / 4, 1, 1),
            proj3: Conv::new(bld, "enc.proj3", 4 * c, d / 4, 1, 1),
            fuse: Conv::new(bld, "enc.fuse", d, d, 1, 1),
            d,
        })
    }

    /// Encodes `image` (`[3,H,W]`, values in `[0,1]`, `H` and `W` divisible by 16).
    pub fn encode<F: Real>(
        &self,
        tape: &mut Tape<F>,
        pv: &ParamVars,
        image: Var,
        frame: usize,
    ) -> Result<FeatureMap, Error> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(TensorError::Shape { op: "encode", detail: format!("image shape {s:?}, want [3,H,W]") }.into());
        }
        let (h, w) = (s[1], s[2]);
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("image {h}x{w} must have both sides divisible by 16")));
        }
        let (hf, wf) = (h / STRIDE, w / STRIDE);

        let x = self.stem.forward(tape, pv, image)?;
        let x = tape.relu(x)?;
        let x = self.down1.forward(tape, pv, x)?;
        let x = tape.relu(x)?;
        let x = self.stage1.forward(tape, pv, x)?;
        let s1 = tape.relu(x)?;
        let x = self.stage2.forward(tape, pv, s1)?;
        let s2 = tape.relu(x)?;
        let x = self.stage3.forward(tape, pv, s2)?;
        let s3 = tape.relu(x)?;

        let p1 = self.proj1.forward(tape, pv, s1)?;
        let p2 = self.proj2.forward(tape, pv, s2)?;
        let p2 = upsample(tape, p2, 2, hf, wf)?;
        let p3 = self.proj3.forward(tape, pv, s3)?;
        let p3 = upsample(tape, p3, 4, hf, wf)?;
        let cat = tape.concat(&[p1, p2, p3], 0)?;
        let o = self.fuse.forward(tape, pv, cat)?;
        Ok(FeatureMap { o, d: self.d, height: hf, width: wf, frame })
    }
}

/// Half-pixel-aligned bilinear upsampling of `x[C,h,w]` by `factor` to `[C,hf,wf]`.
fn upsample<F: Real>(tape: &mut Tape<F>, x: Var, factor: usize, hf: usize, wf: usize) -> Result<Var, TensorError> {
    let c = tape.shape(x)[0];
    let f = factor as f64;
    let mut coords = Vec::with_capacity(hf * wf * 2);
    for y in 0..hf {
        for xx in 0..wf {
            coords.push(F::of((xx as f64 + 0.5) / f - 0.5));
            coords.push(F::of((y as f64 + 0.5) / f - 0.5));
        }
    }
    let coords = tape.constant(Tensor::new(vec![hf * wf, 2], coords)?)?;
    let sampled = tape.bilinear_sample(x, coords)?;
    let t = tape.transpose(sampled)?;
    tape.reshape(t, &[c, hf, wf])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamStore};

    fn build(seed: u64) -> (Encoder, ParamStore<f32>) {
        let mut store = ParamStore::default();
        let mut init = Init::new(seed);
        let enc = Encoder::new(&mut Builder { store: &mut store, init: &mut init }, 8, 32).unwrap();
        (enc, store)
    }

    #[test]
    fn shape_contract() {
        let (enc, store) = build(1);
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, false).unwrap();
        let img = tape.constant(Tensor::full(vec![3, 48, 64], 0.3f32)).unwrap();
        let fm = enc.encode(&mut tape, &pv, img, 0).unwrap();
        assert_eq!(tape.shape(fm.o), &[32, 12, 16]);
    }

    #[test]
    fn rejects_bad_dims() {
        let (enc, store) = build(1);
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, false).unwrap();
        let img = tape.constant(Tensor::full(vec![3, 40, 64], 0.3f32)).unwrap();
        assert!(matches!(enc.encode(&mut tape, &pv, img, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let (enc, mut store) = build(2);
        let bias_ids: Vec<_> = store.names().iter().filter(|n| n.ends_with(".b")).cloned().collect();
        for n in bias_ids {
            let id = store.id_of(&n).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, false).unwrap();
        let img = tape.constant(Tensor::zeros(vec![3, 32, 32])).unwrap();
        let fm = enc.encode(&mut tape, &pv, img, 0).unwrap();
        assert!(tape.value(fm.o).data().iter().all(|&v| v == 0.0));
    }
}
