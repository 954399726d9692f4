//! Box-guided sparse feature sampling.
//!
//! Feature maps are `[H, W, D]` row-major. Cell `(i, j)` has its centre at
//! continuous coordinate `(j + 0.5, i + 0.5)`; a normalised image coordinate
//! `u` maps to `u * W` along x. Bilinear samples use zero padding outside the
//! map. RoIAlign takes exactly one sample at the centre of each of the
//! `K x K` bins of a box.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{Tap, Tape, Tensor, Var};

const POS_TEMPERATURE: f64 = 10000.0;

/// One level of a feature pyramid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub stride: usize,
    /// `[height, width, channels]`.
    pub values: Tensor,
}

impl FeatureMap {
    pub fn new(stride: usize, values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Shape(format!(
                "feature map must be [H, W, D], got {:?}",
                values.dims()
            )));
        }
        Ok(Self { stride, values })
    }

    pub fn height(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let d = self.channels();
        let at = (i * self.width() + j) * d;
        &self.values.data()[at..at + d]
    }
}

/// Raw backbone-style features ordered fine to coarse.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureMap>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureMap>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Shape("pyramid with no levels".into()))?;
        let c = first.channels();
        if levels.iter().any(|l| l.channels() != c) {
            return Err(Error::Shape("pyramid levels differ in channel count".into()));
        }
        Ok(Self { levels })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn top(&self) -> &FeatureMap {
        self.levels.last().unwrap()
    }
}

/// A level that lives on a tape: `[H * W, D]` rows in row-major cell order.
#[derive(Clone, Copy, Debug)]
pub struct LevelVar {
    pub values: Var,
    pub height: usize,
    pub width: usize,
}

/// Sampling sources for the decoder. The coarsest entry holds the encoder
/// output; finer entries hold embedded but unencoded features.
#[derive(Clone, Debug)]
pub struct EncodedPyramid {
    pub levels: Vec<LevelVar>,
    pub pos_top: Var,
}

impl EncodedPyramid {
    pub fn encoded_top(&self) -> LevelVar {
        *self.levels.last().unwrap()
    }
}

/// Per-query key/value sequences built from box-guided samples.
#[derive(Clone, Copy, Debug)]
pub struct SparseKv {
    /// `[N, levels * K^2, D]`.
    pub keys_values: Var,
    /// `[N, levels * K^2, D]`, gradient-free.
    pub pos: Var,
}

/// Sine positional embedding of normalised `(x, y)` points.
///
/// The first `D/2` channels encode `x`, the rest `y`. Within each half,
/// channel `i` uses frequency `T^(2 floor(i/2) / (D/2))` with `T = 10000`;
/// even channels take the sine, odd ones the cosine of `2 pi u / freq`.
pub fn sine_pos_embed(coords: &[(f64, f64)], d: usize) -> Result<Tensor> {
    if d == 0 || d % 4 != 0 {
        return Err(Error::Config(format!(
            "positional embedding width {d} must be a positive multiple of 4"
        )));
    }
    if coords.is_empty() {
        return Err(Error::Shape("no coordinates to embed".into()));
    }
    let half = d / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| {
            let e = 2.0 * (i / 2) as f64 / half as f64;
            std::f64::consts::TAU / POS_TEMPERATURE.powf(e)
        })
        .collect();
    let mut out = Vec::with_capacity(coords.len() * d);
    for &(x, y) in coords {
        for u in [x, y] {
            for (i, f) in inv_freq.iter().enumerate() {
                let phase = u * f;
                out.push(if i % 2 == 0 { phase.sin() } else { phase.cos() });
            }
        }
    }
    Tensor::new(vec![coords.len(), d], out)
}

/// The four bilinear taps for continuous cell coordinate `(x, y)` on an
/// `h x w` grid. Taps that fall off the grid get weight 0.
pub fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [Tap; 4] {
    let u = x - 0.5;
    let v = y - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fx = u - j0;
    let fy = v - i0;
    let mut taps = [Tap { row: 0, weight: 0.0 }; 4];
    let corners = [
        (i0, j0, (1.0 - fy) * (1.0 - fx)),
        (i0, j0 + 1.0, (1.0 - fy) * fx),
        (i0 + 1.0, j0, fy * (1.0 - fx)),
        (i0 + 1.0, j0 + 1.0, fy * fx),
    ];
    for (slot, (i, j, wt)) in taps.iter_mut().zip(corners) {
        if i >= 0.0 && j >= 0.0 && (i as usize) < h && (j as usize) < w {
            *slot = Tap {
                row: i as usize * w + j as usize,
                weight: wt,
            };
        }
    }
    taps
}

/// Bilinear blend of the cell centres around `(x, y)`, in cell units.
pub fn bilinear_sample(map: &FeatureMap, x: f64, y: f64) -> Vec<f64> {
    let d = map.channels();
    let mut out = vec![0.0; d];
    for tap in bilinear_taps(map.height(), map.width(), x, y) {
        if tap.weight == 0.0 {
            continue;
        }
        let src = &map.values.data()[tap.row * d..(tap.row + 1) * d];
        out.iter_mut().zip(src).for_each(|(o, s)| *o += tap.weight * s);
    }
    out
}

/// Normalised bin-centre coordinates of each box, row-major over bins.
pub fn roi_points(boxes: &[BBox], k: usize) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(boxes.len() * k * k);
    for b in boxes {
        let [x1, y1, x2, y2] = b.corners();
        let (bw, bh) = ((x2 - x1) / k as f64, (y2 - y1) / k as f64);
        for a in 0..k {
            for c in 0..k {
                pts.push((x1 + (c as f64 + 0.5) * bw, y1 + (a as f64 + 0.5) * bh));
            }
        }
    }
    pts
}

fn roi_taps(h: usize, w: usize, boxes: &[BBox], k: usize) -> Vec<Tap> {
    roi_points(boxes, k)
        .into_iter()
        .flat_map(|(x, y)| bilinear_taps(h, w, x * w as f64, y * h as f64))
        .collect()
}

fn check_roi(boxes: &[BBox], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("RoI resolution must be at least 1".into()));
    }
    if boxes.is_empty() {
        return Err(Error::Shape("RoIAlign with no boxes".into()));
    }
    Ok(())
}

/// RoIAlign on a value-level map: `[N, K^2, D]`.
pub fn roi_align(map: &FeatureMap, boxes: &[BBox], k: usize) -> Result<Tensor> {
    check_roi(boxes, k)?;
    let mut tape = Tape::new();
    let v = tape.constant(map.values.clone());
    let level = LevelVar {
        values: v,
        height: map.height(),
        width: map.width(),
    };
    let out = roi_align_var(&mut tape, level, boxes, k)?;
    Ok(tape.value(out).clone())
}

/// Differentiable RoIAlign over a tape level: `[N, K^2, D]`.
pub fn roi_align_var(tape: &mut Tape, level: LevelVar, boxes: &[BBox], k: usize) -> Result<Var> {
    check_roi(boxes, k)?;
    let d = *tape.dims(level.values).last().unwrap();
    if tape.value(level.values).numel() != level.height * level.width * d {
        return Err(Error::Shape("level extent does not match height x width".into()));
    }
    let taps = roi_taps(level.height, level.width, boxes, k);
    tape.weighted_rows(level.values, taps, 4, &[boxes.len(), k * k, d])
}

/// Flattens a map to `[H * W, C]` rows and projects them with `x W + b`.
pub fn flatten_embed(tape: &mut Tape, map: &FeatureMap, weight: Var, bias: Option<Var>) -> Result<Var> {
    let flat = map
        .values
        .clone()
        .reshaped(&[map.height() * map.width(), map.channels()])?;
    let x = tape.constant(flat);
    let y = tape.matmul(x, weight)?;
    match bias {
        Some(b) => tape.add(y, b),
        None => Ok(y),
    }
}

/// Concatenates RoIAlign samples from the chosen levels per query, with
/// sine embeddings of each sample point's normalised image position.
pub fn build_multiscale_kv(
    tape: &mut Tape,
    pyramid: &EncodedPyramid,
    boxes: &[BBox],
    k: usize,
    levels_used: &[usize],
) -> Result<SparseKv> {
    if levels_used.is_empty() {
        return Err(Error::Config("no sampling levels selected".into()));
    }
    if let Some(&bad) = levels_used.iter().find(|&&l| l >= pyramid.levels.len()) {
        return Err(Error::Config(format!(
            "level {bad} not in a {}-level pyramid",
            pyramid.levels.len()
        )));
    }
    let parts = levels_used
        .iter()
        .map(|&l| roi_align_var(tape, pyramid.levels[l], boxes, k))
        .collect::<Result<Vec<_>>>()?;
    let keys_values = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts, 1)?
    };
    let d = *tape.dims(keys_values).last().unwrap();
    let per_level = sine_pos_embed(&roi_points(boxes, k), d)?;
    let (n, kk) = (boxes.len(), k * k);
    let mut pos = Vec::with_capacity(n * kk * levels_used.len() * d);
    for q in 0..n {
        let rows = &per_level.data()[q * kk * d..(q + 1) * kk * d];
        for _ in levels_used {
            pos.extend_from_slice(rows);
        }
    }
    let pos = tape.constant(Tensor::new(vec![n, kk * levels_used.len(), d], pos)?);
    Ok(SparseKv { keys_values, pos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn map(h: usize, w: usize, d: usize, vals: Vec<f64>) -> FeatureMap {
        FeatureMap::new(8, Tensor::new(vec![h, w, d], vals).unwrap()).unwrap()
    }

    #[test]
    fn pos_embed_at_origin() {
        let p = sine_pos_embed(&[(0.0, 0.0)], 8).unwrap();
        assert_eq!(p.data(), &[0., 1., 0., 1., 0., 1., 0., 1.]);
        assert!(matches!(sine_pos_embed(&[(0.0, 0.0)], 6), Err(Error::Config(_))));
    }

    #[test]
    fn pos_embed_rows_depend_on_position_only() {
        let p = sine_pos_embed(&[(0.2, 0.5), (0.2, 0.5), (0.8, 0.5)], 16).unwrap();
        assert_eq!(p.row(0), p.row(1));
        assert_ne!(&p.row(0)[..8], &p.row(2)[..8]);
        assert_eq!(&p.row(0)[8..], &p.row(2)[8..]);
        assert!(p.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn bilinear_cases() {
        let m = map(2, 2, 1, vec![1., 2., 3., 4.]);
        assert_eq!(bilinear_sample(&m, 1.0, 1.0), vec![2.5]);
        assert_eq!(bilinear_sample(&m, 1.5, 0.5), vec![2.0]);
        let c = map(3, 3, 2, vec![0.7; 18]);
        for (x, y) in [(0.5, 0.5), (1.3, 2.1), (2.5, 1.7)] {
            for v in bilinear_sample(&c, x, y) {
                assert!((v - 0.7).abs() < 1e-12);
            }
        }
        // half a cell outside the border blends with zero padding
        assert_eq!(bilinear_sample(&m, 0.0, 0.5), vec![0.5]);
    }

    #[test]
    fn roi_align_shape_and_constant_field() {
        let m = map(8, 8, 8, vec![1.25; 512]);
        let boxes = vec![
            BBox::cxcywh(0.5, 0.5, 0.4, 0.4).unwrap(),
            BBox::cxcywh(0.3, 0.6, 0.2, 0.5).unwrap(),
            BBox::cxcywh(0.7, 0.2, 0.1, 0.1).unwrap(),
        ];
        let out = roi_align(&m, &boxes, 4).unwrap();
        assert_eq!(out.dims(), &[3, 16, 8]);
        assert!(out.data().iter().all(|v| (v - 1.25).abs() < 1e-12));
    }

    #[test]
    fn aligned_box_reads_cells_exactly() {
        let vals = Tensor::create(&[8, 8, 3], Init::Uniform { lo: -1.0, hi: 1.0, seed: 3 }).unwrap();
        let m = FeatureMap::new(8, vals).unwrap();
        // cells rows 2..6, cols 1..5
        let b = BBox::cxcywh(3.0 / 8.0, 4.0 / 8.0, 0.5, 0.5).unwrap();
        let out = roi_align(&m, &[b], 4).unwrap();
        for a in 0..4 {
            for c in 0..4 {
                let got = &out.data()[(a * 4 + c) * 3..(a * 4 + c + 1) * 3];
                let want = m.cell(2 + a, 1 + c);
                for (g, w) in got.iter().zip(want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    fn constant_pyramid(tape: &mut Tape, c: f64) -> EncodedPyramid {
        let levels = [(32, 32), (16, 16), (8, 8)]
            .iter()
            .map(|&(h, w)| LevelVar {
                values: tape.constant(Tensor::create(&[h * w, 8], Init::Constant(c)).unwrap()),
                height: h,
                width: w,
            })
            .collect();
        let pos_top = tape.constant(Tensor::zeros(&[64, 8]).unwrap());
        EncodedPyramid { levels, pos_top }
    }

    #[test]
    fn multiscale_kv_lengths() {
        let mut tape = Tape::new();
        let pyr = constant_pyramid(&mut tape, -0.5);
        let boxes = vec![
            BBox::cxcywh(0.5, 0.5, 0.3, 0.3).unwrap(),
            BBox::cxcywh(0.2, 0.8, 0.1, 0.2).unwrap(),
        ];
        let kv = build_multiscale_kv(&mut tape, &pyr, &boxes, 4, &[0, 1, 2]).unwrap();
        assert_eq!(tape.dims(kv.keys_values), &[2, 48, 8]);
        assert_eq!(tape.dims(kv.pos), &[2, 48, 8]);
        assert!(tape.data(kv.keys_values).iter().all(|v| (v + 0.5).abs() < 1e-12));

        let single = build_multiscale_kv(&mut tape, &pyr, &boxes, 4, &[2]).unwrap();
        let direct = roi_align_var(&mut tape, pyr.levels[2], &boxes, 4).unwrap();
        assert_eq!(tape.data(single.keys_values), tape.data(direct));

        assert!(matches!(
            build_multiscale_kv(&mut tape, &pyr, &boxes, 4, &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn flatten_embed_row_order() {
        let vals: Vec<f64> = (0..12).map(f64::from).collect();
        let m = map(2, 3, 2, vals.clone());
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap());
        let out = flatten_embed(&mut tape, &m, eye, None).unwrap();
        assert_eq!(tape.dims(out), &[6, 2]);
        assert_eq!(tape.data(out), &vals[..]);
        for k in 0..6 {
            assert_eq!(tape.value(out).row(k), m.cell(k / 3, k % 3));
        }
        let zero = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        let z = flatten_embed(&mut tape, &m, zero, None).unwrap();
        assert!(tape.data(z).iter().all(|&v| v == 0.0));
    }
}
