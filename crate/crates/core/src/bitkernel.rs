//! Bit-packed ±1 tensors and the XNOR/popcount convolution.
//!
//! Bit convention: `1` is `+1`, `0` is `-1`. Activations are packed along the
//! width axis, one run of `u64` words per `(channel, row)`. For two ±1 vectors
//! of length `n`, `dot = popcount(XNOR) - popcount(XOR) = n - 2 * popcount(a ^ b)`.
//!
//! Padding cells are `-1` (bit `0`), matching `sign(0) = -1`, so every output
//! sums exactly `C_in * K_h * K_w` terms.

use alloc::vec;
use alloc::vec::Vec;

use crate::binarize::{sign_activations, BinarizedWeights, ScaleScope};
use crate::tensor::{conv2d_fp, ConvSpec};
use crate::{Error, Result, Tensor};

const WORD: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

/// Sign bits of one `(channels, height, width)` image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBitPlane {
    channels: usize,
    height: usize,
    width: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedBitPlane {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Valid bits in every row; bits past this in the last word are zero.
    pub fn valid_bits(&self) -> usize {
        self.width
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row(&self, c: usize, h: usize) -> &[u64] {
        let start = (c * self.height + h) * self.words_per_row;
        &self.words[start..start + self.words_per_row]
    }

    #[inline]
    pub fn bit(&self, c: usize, h: usize, w: usize) -> bool {
        self.row(c, h)[w / WORD] >> (w % WORD) & 1 == 1
    }

    /// Pack image `b` of a ±1 tensor.
    pub fn pack_image(signs: &Tensor, b: usize) -> Result<Self> {
        let [_, c, h, w] = signs.shape();
        let wpr = words_for(w);
        let mut words = vec![0u64; c * h * wpr];
        let base = b * c * h * w;
        for (i, &v) in signs.image(b).iter().enumerate() {
            let bit = if v == 1.0 {
                1
            } else if v == -1.0 {
                0
            } else {
                return Err(Error::NotBinary {
                    index: base + i,
                    value: v,
                });
            };
            let col = i % w;
            let row = i / w;
            words[row * wpr + col / WORD] |= bit << (col % WORD);
        }
        Ok(PackedBitPlane {
            channels: c,
            height: h,
            width: w,
            words_per_row: wpr,
            words,
        })
    }

    /// Unpack into a `[1, C, H, W]` tensor of ±1.
    pub fn unpack(&self) -> Tensor {
        Tensor::from_fn([1, self.channels, self.height, self.width], |[_, c, h, w]| {
            if self.bit(c, h, w) {
                1.0
            } else {
                -1.0
            }
        })
    }
}

/// Pack every image of a ±1 tensor.
pub fn pack(signs: &Tensor) -> Result<Vec<PackedBitPlane>> {
    (0..signs.batch()).map(|b| PackedBitPlane::pack_image(signs, b)).collect()
}

/// Stack unpacked images back into one tensor.
pub fn unpack(planes: &[PackedBitPlane]) -> Result<Tensor> {
    let parts: Vec<Tensor> = planes.iter().map(PackedBitPlane::unpack).collect();
    Tensor::stack(&parts)
}

/// Packed kernel signs: one word per `(out, in, kernel_row)`, low `K_w` bits used.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedKernel {
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    rows: Vec<u64>,
    pub scales: Vec<f64>,
    pub scope: ScaleScope,
}

impl PackedKernel {
    pub fn from_binarized(w: &BinarizedWeights) -> Result<Self> {
        let [o, i, kh, kw] = w.signs.shape();
        if kw > WORD {
            return Err(Error::dim("kernel width", WORD, kw));
        }
        let mut rows = vec![0u64; o * i * kh];
        for (idx, &v) in w.signs.data().iter().enumerate() {
            let bit = if v == 1.0 {
                1
            } else if v == -1.0 {
                0
            } else {
                return Err(Error::NotBinary { index: idx, value: v });
            };
            rows[idx / kw] |= bit << (idx % kw);
        }
        Ok(PackedKernel {
            out_channels: o,
            in_channels: i,
            kernel_h: kh,
            kernel_w: kw,
            rows,
            scales: w.scales.clone(),
            scope: w.scope,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    #[inline]
    pub fn row(&self, o: usize, i: usize, kh: usize) -> u64 {
        self.rows[(o * self.in_channels + i) * self.kernel_h + kh]
    }

    #[inline]
    pub fn bit(&self, o: usize, i: usize, kh: usize, kw: usize) -> bool {
        self.row(o, i, kh) >> kw & 1 == 1
    }

    pub fn unpack_signs(&self) -> Tensor {
        Tensor::from_fn(self.shape(), |[o, i, kh, kw]| if self.bit(o, i, kh, kw) { 1.0 } else { -1.0 })
    }

    #[inline]
    pub fn scale_for(&self, o: usize) -> f64 {
        match self.scope {
            ScaleScope::Layer => self.scales[0],
            ScaleScope::Filter => self.scales[o],
        }
    }

    /// Terms summed per output element.
    pub fn window_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

/// Integer output of a binary convolution, `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<i32>,
}

impl CountMap {
    pub fn get(&self, c: usize, h: usize, w: usize) -> i32 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("count map shape")
    }
}

fn check_operands(x: &PackedBitPlane, w: &PackedKernel, padding: usize) -> Result<(usize, usize)> {
    if x.channels != w.in_channels {
        return Err(Error::dim("input channels", w.in_channels, x.channels));
    }
    let spec = ConvSpec {
        in_channels: w.in_channels,
        out_channels: w.out_channels,
        kernel_h: w.kernel_h,
        kernel_w: w.kernel_w,
        padding,
        pad_value: -1.0,
    };
    spec.output_hw(x.height, x.width)
}

/// Bits `[start, start + 64)` of a row, zero outside `[0, width)`.
#[inline]
fn window64(row: &[u64], start: isize, width: usize) -> u64 {
    let read = |w: isize| -> u64 {
        if w < 0 || w as usize >= row.len() {
            0
        } else {
            row[w as usize]
        }
    };
    let word = start.div_euclid(WORD as isize);
    let off = start.rem_euclid(WORD as isize) as u32;
    let lo = read(word) >> off;
    let hi = if off == 0 { 0 } else { read(word + 1) << (WORD as u32 - off) };
    let mut v = lo | hi;
    // Clear bits that fall before column 0 or at/after `width`.
    if start < 0 {
        let skip = (-start) as u32;
        v = if skip >= 64 { 0 } else { v & (!0u64 << skip) };
    }
    let end = start + WORD as isize;
    if end > width as isize {
        let keep = (width as isize - start).max(0) as u32;
        v = if keep >= 64 { v } else { v & ((1u64 << keep) - 1) };
    }
    v
}

/// Reference XNOR + bitcount, one receptive-field row at a time.
///
/// `dot = 2 * popcount(XNOR(x, w) & mask) - n`, summed over input channels
/// and kernel rows. Padding rows and columns read as `-1`.
pub fn xnor_popcount_conv_direct(x: &PackedBitPlane, w: &PackedKernel, padding: usize) -> Result<CountMap> {
    let (oh, ow) = check_operands(x, w, padding)?;
    let kw = w.kernel_w;
    let mask = if kw == WORD { !0u64 } else { (1u64 << kw) - 1 };
    let p = padding as isize;
    let mut data = vec![0i32; w.out_channels * oh * ow];
    for o in 0..w.out_channels {
        for y in 0..oh {
            for xo in 0..ow {
                let mut agree = 0u32;
                for i in 0..w.in_channels {
                    for kh in 0..w.kernel_h {
                        let iy = y as isize + kh as isize - p;
                        let win = if iy < 0 || iy >= x.height as isize {
                            0
                        } else {
                            window64(x.row(i, iy as usize), xo as isize - p, x.width)
                        };
                        agree += (!(win ^ w.row(o, i, kh)) & mask).count_ones();
                    }
                }
                data[(o * oh + y) * ow + xo] = 2 * agree as i32 - w.window_len() as i32;
            }
        }
    }
    Ok(CountMap {
        channels: w.out_channels,
        height: oh,
        width: ow,
        data,
    })
}

/// Full adder on 64 columns: `(sum, carry)`.
#[inline(always)]
fn csa(a: u64, b: u64, c: u64) -> (u64, u64) {
    let u = a ^ b;
    (u ^ c, (a & b) | (u & c))
}

/// Add one bit per column at weight `2^from` into bit-sliced counters.
#[inline(always)]
fn add_at(counters: &mut [u64], mut carry: u64, from: usize) {
    for plane in &mut counters[from..] {
        if carry == 0 {
            break;
        }
        let next = *plane & carry;
        *plane ^= carry;
        carry = next;
    }
}

/// Per-column popcount of `words` into bit-sliced `counters` (at least four planes),
/// eight words at a time through a carry-save adder tree.
fn count_columns(words: &[u64], counters: &mut [u64]) {
    counters.fill(0);
    let (mut ones, mut twos, mut fours) = (0u64, 0u64, 0u64);
    let mut chunks = words.chunks_exact(8);
    for b in &mut chunks {
        let (o1, ta) = csa(ones, b[0], b[1]);
        let (o2, tb) = csa(o1, b[2], b[3]);
        let (t1, fa) = csa(twos, ta, tb);
        let (o3, tc) = csa(o2, b[4], b[5]);
        let (o4, td) = csa(o3, b[6], b[7]);
        let (t2, fb) = csa(t1, tc, td);
        let (f1, eights) = csa(fours, fa, fb);
        ones = o4;
        twos = t2;
        fours = f1;
        add_at(counters, eights, 3);
    }
    for &v in chunks.remainder() {
        add_at(counters, v, 0);
    }
    add_at(counters, ones, 0);
    add_at(counters, twos, 1);
    add_at(counters, fours, 2);
}

/// XNOR/popcount convolution over 64 output columns at a time.
///
/// For each kernel tap the shifted input row is XORed with the broadcast
/// kernel bit, giving one disagreement bit per output column; those bits are
/// summed in bit-sliced counters and the result is `n - 2 * count`.
pub fn xnor_popcount_conv(x: &PackedBitPlane, w: &PackedKernel, padding: usize) -> Result<CountMap> {
    let (oh, ow) = check_operands(x, w, padding)?;
    let (cin, kh_n, kw_n) = (w.in_channels, w.kernel_h, w.kernel_w);
    let p = padding as isize;
    let hp = x.height + 2 * padding;
    let nwo = words_for(ow);
    let taps = cin * kw_n;

    // shifted[((r * nwo + j) * cin + i) * kw_n + kw]: input bits for output columns
    // 64j..64j+63 at padded row r, channel i, kernel column kw.
    let mut shifted = vec![0u64; hp * nwo * taps];
    for r in 0..hp {
        let iy = r as isize - p;
        if iy < 0 || iy >= x.height as isize {
            continue;
        }
        for i in 0..cin {
            let row = x.row(i, iy as usize);
            for j in 0..nwo {
                for kw in 0..kw_n {
                    let start = (j * WORD) as isize + kw as isize - p;
                    shifted[((r * nwo + j) * cin + i) * kw_n + kw] = window64(row, start, x.width);
                }
            }
        }
    }

    // Broadcast kernel bits: all-ones for +1 so XOR flips the input.
    let mut kmask = vec![0u64; w.out_channels * kh_n * taps];
    for o in 0..w.out_channels {
        for kh in 0..kh_n {
            for i in 0..cin {
                for kw in 0..kw_n {
                    let bit = w.bit(o, i, kh, kw);
                    kmask[((o * kh_n + kh) * cin + i) * kw_n + kw] = if bit { !0 } else { 0 };
                }
            }
        }
    }

    let n = w.window_len();
    let planes = ((usize::BITS - n.leading_zeros()) as usize).max(4);
    let mut data = vec![0i32; w.out_channels * oh * ow];
    let mut counters = [0u64; 64];
    let mut diff = vec![0u64; kh_n * taps];
    for o in 0..w.out_channels {
        for y in 0..oh {
            for j in 0..nwo {
                for kh in 0..kh_n {
                    let xs = &shifted[((y + kh) * nwo + j) * taps..][..taps];
                    let ks = &kmask[(o * kh_n + kh) * taps..][..taps];
                    for ((d, &xv), &kv) in diff[kh * taps..].iter_mut().zip(xs).zip(ks) {
                        *d = xv ^ kv;
                    }
                }
                let c = &mut counters[..planes];
                count_columns(&diff, c);
                let cols = (ow - j * WORD).min(WORD);
                let dst = &mut data[(o * oh + y) * ow + j * WORD..][..cols];
                for (bit, d) in dst.iter_mut().enumerate() {
                    let mut count = 0i32;
                    for (b, plane) in c.iter().enumerate() {
                        count |= ((plane >> bit & 1) as i32) << b;
                    }
                    *d = n as i32 - 2 * count;
                }
            }
        }
    }
    Ok(CountMap {
        channels: w.out_channels,
        height: oh,
        width: ow,
        data,
    })
}

/// `scale * (sign(x, alpha) ⊛ signs)` through the packed kernel.
pub fn scaled_binary_conv(x: &Tensor, weights: &BinarizedWeights, alpha: &[f64], padding: usize) -> Result<Tensor> {
    let kernel = PackedKernel::from_binarized(weights)?;
    let signs = sign_activations(x, alpha)?;
    scaled_binary_conv_packed(&signs, &kernel, padding)
}

/// Binary conv of an already-binarized ±1 tensor with a packed kernel.
pub fn scaled_binary_conv_packed(signs: &Tensor, kernel: &PackedKernel, padding: usize) -> Result<Tensor> {
    let mut images = Vec::with_capacity(signs.batch());
    for b in 0..signs.batch() {
        let plane = PackedBitPlane::pack_image(signs, b)?;
        let counts = xnor_popcount_conv(&plane, kernel, padding)?;
        let mut t = counts.to_tensor();
        let per = counts.height * counts.width;
        for (idx, v) in t.data_mut().iter_mut().enumerate() {
            *v *= kernel.scale_for(idx / per);
        }
        images.push(t);
    }
    Tensor::stack(&images)
}

/// Same result as [`scaled_binary_conv`] through the float convolution.
pub fn scaled_binary_conv_reference(
    x: &Tensor,
    weights: &BinarizedWeights,
    alpha: &[f64],
    padding: usize,
) -> Result<Tensor> {
    let signs = sign_activations(x, alpha)?;
    let [o, i, kh, kw] = weights.signs.shape();
    let spec = ConvSpec {
        in_channels: i,
        out_channels: o,
        kernel_h: kh,
        kernel_w: kw,
        padding,
        pad_value: -1.0,
    };
    let mut out = conv2d_fp(&signs, &weights.signs, &spec)?;
    let per = out.height() * out.width();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v *= weights.scale_for((idx / per) % o);
    }
    Ok(out)
}
