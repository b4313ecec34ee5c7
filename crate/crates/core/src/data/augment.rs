use serde::{Deserialize, Serialize};

use crate::numeric::{Rng, Tensor};

const CROP_PAD: usize = 4;
const JITTER: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub jitter: bool,
}

impl AugmentFlags {
    pub fn any(self) -> bool {
        self.flip || self.crop || self.jitter
    }
}

/// Mirror a C×H×W image left-right.
pub fn hflip(img: &Tensor) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let x = i % w;
        let row = i / w;
        debug_assert!(row < s[0] * h);
        src[row * w + (w - 1 - x)]
    })
}

/// Zero-pad by 4 then cut the original size at offset `(oy, ox) ∈ [0, 8]²`.
fn pad_crop(img: &Tensor, oy: usize, ox: usize) -> Tensor {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let src = img.data();
    Tensor::from_fn(s, |i| {
        let x = i % w;
        let y = (i / w) % h;
        let c = i / (w * h);
        let (sy, sx) = (y + oy, x + ox);
        if sy < CROP_PAD || sx < CROP_PAD || sy >= h + CROP_PAD || sx >= w + CROP_PAD {
            0.0
        } else {
            src[(c * h + sy - CROP_PAD) * w + sx - CROP_PAD]
        }
    })
}

/// Training-time augmentation: horizontal flip (p = 0.5), pad-4 random crop,
/// and brightness/contrast jitter of ±10 %.
pub fn augment(img: &Tensor, rng: &mut Rng, flags: AugmentFlags) -> Tensor {
    let mut out = img.clone();
    if flags.flip && rng.coin(0.5) {
        out = hflip(&out);
    }
    if flags.crop {
        let oy = rng.below(2 * CROP_PAD + 1);
        let ox = rng.below(2 * CROP_PAD + 1);
        out = pad_crop(&out, oy, ox);
    }
    if flags.jitter {
        let brightness = rng.uniform(1.0 - JITTER, 1.0 + JITTER);
        let contrast = rng.uniform(1.0 - JITTER, 1.0 + JITTER);
        let plane = out.len() / out.shape()[0];
        for ch in out.data_mut().chunks_mut(plane) {
            let mean = ch.iter().sum::<f64>() / plane as f64;
            for v in ch.iter_mut() {
                *v = ((*v - mean) * contrast + mean) * brightness;
            }
        }
    }
    out
}
