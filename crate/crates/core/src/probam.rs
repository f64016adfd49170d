//! Probability-guided activation maps from routing traces, first-layer
//! channel-sum maps, and their rendering as colour overlays.
//!
//! For one sample the weight of low-level capsule `i` is
//! `w_i = sum_j c_ij * |v_j|`. Capsules are mapped back to their feature-map
//! site (see [`capsule_site`]), summed over channel slots, and divided by
//! the map's maximum. First-layer maps, which can be negative, are min-max
//! normalized instead.

use std::path::Path;

use crate::backend::Float;
use crate::capsule::{capsule_site, RoutingTrace};
use crate::error::{Error, Result};

/// A 2-D map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl ActivationMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape("activation_map", format!("{} values for {height}x{width}", values.len())));
        }
        Ok(ActivationMap { height, width, values })
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Shape of the feature map the low-level capsules were cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub capsule_dim: usize,
}

impl MapGeometry {
    pub fn slots(&self) -> usize {
        self.channels / self.capsule_dim
    }

    pub fn capsules(&self) -> usize {
        self.slots() * self.height * self.width
    }
}

/// In-place min-max normalization; an all-equal input becomes all zeros.
pub fn normalize(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    match hi.partial_cmp(&lo) {
        Some(std::cmp::Ordering::Greater) => values.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo)),
        _ => values.iter_mut().for_each(|v| *v = 0.0),
    }
}

/// In-place division by the maximum of non-negative values; all zeros stay zeros.
pub fn normalize_max(values: &mut [f64]) {
    let hi = values.iter().fold(0.0f64, |hi, &v| hi.max(v));
    if hi > 0.0 {
        values.iter_mut().for_each(|v| *v /= hi);
    }
}

fn to_map(height: usize, width: usize, raw: Vec<f64>) -> ActivationMap {
    ActivationMap {
        height,
        width,
        values: raw.into_iter().map(|v| v as f32).collect(),
    }
}

/// Per-capsule weights `w_i = sum_j c_ij |v_j|` of sample `b`.
pub fn capsule_weights<T: Float>(trace: &RoutingTrace<T>, b: usize) -> Result<Vec<f64>> {
    if b >= trace.batch() {
        return Err(Error::Contract(format!("sample {b} outside a batch of {}", trace.batch())));
    }
    let (n, m) = (trace.low_count(), trace.high_count());
    let lengths = trace.lengths();
    let p = &lengths.data()[b * m..(b + 1) * m];
    let c = &trace.coupling.data()[b * n * m..(b + 1) * n * m];
    Ok(c
        .chunks_exact(m)
        .map(|row| row.iter().zip(p).map(|(&c, &p)| c.to_f64().unwrap() * p.to_f64().unwrap()).sum())
        .collect())
}

/// Site map before normalization: capsule weights summed over channel slots.
pub fn probam_raw<T: Float>(trace: &RoutingTrace<T>, b: usize, geo: MapGeometry) -> Result<Vec<f64>> {
    if geo.capsule_dim == 0 || !geo.channels.is_multiple_of(geo.capsule_dim) || trace.low_count() != geo.capsules() {
        return Err(Error::shape(
            "probam_map",
            format!("trace has {} capsules, geometry {geo:?} implies {}", trace.low_count(), geo.capsules()),
        ));
    }
    let weights = capsule_weights(trace, b)?;
    let mut raw = vec![0.0; geo.height * geo.width];
    for (i, w) in weights.into_iter().enumerate() {
        let (_, y, x) = capsule_site(i, geo.height, geo.width);
        raw[y * geo.width + x] += w;
    }
    Ok(raw)
}

pub fn probam_map<T: Float>(trace: &RoutingTrace<T>, b: usize, geo: MapGeometry) -> Result<ActivationMap> {
    let mut raw = probam_raw(trace, b, geo)?;
    normalize_max(&mut raw);
    Ok(to_map(geo.height, geo.width, raw))
}

/// Channel sum of one `[c, h, w]` feature map, before normalization.
pub fn conv1_raw(fmap: &[f32], shape: [usize; 3]) -> Result<Vec<f64>> {
    let [c, h, w] = shape;
    if fmap.len() != c * h * w {
        return Err(Error::shape("conv1_map", format!("{} values for {shape:?}", fmap.len())));
    }
    let mut raw = vec![0.0; h * w];
    for plane in fmap.chunks_exact(h * w) {
        raw.iter_mut().zip(plane).for_each(|(r, &v)| *r += f64::from(v));
    }
    Ok(raw)
}

pub fn conv1_map(fmap: &[f32], shape: [usize; 3]) -> Result<ActivationMap> {
    let mut raw = conv1_raw(fmap, shape)?;
    normalize(&mut raw);
    Ok(to_map(shape[1], shape[2], raw))
}

/// Bilinear upsampling with half-pixel centres (corners not aligned).
pub fn resize(map: &ActivationMap, height: usize, width: usize) -> Result<ActivationMap> {
    if height < map.height || width < map.width {
        return Err(Error::Contract(format!(
            "resize target {height}x{width} is smaller than {}x{}",
            map.height, map.width
        )));
    }
    // Source coordinate and the two neighbours with the weight of the upper one.
    let axis = |dst: usize, out: usize, src: usize| -> (usize, usize, f32) {
        let s = ((dst as f32 + 0.5) * src as f32 / out as f32 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src - 1);
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - i0 as f32)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, height, map.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, width, map.width);
            let top = map.at(y0, x0) * (1.0 - fx) + map.at(y0, x1) * fx;
            let bottom = map.at(y1, x0) * (1.0 - fx) + map.at(y1, x1) * fx;
            values.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
        }
    }
    ActivationMap::new(height, width, values)
}

/// Anchors of the colormap: blue at 0, green at 0.5, red at 1.
pub const COLORMAP_ANCHORS: [[u8; 3]; 3] = [[0, 0, 255], [0, 255, 0], [255, 0, 0]];

/// 256-entry lookup table, linear between the anchors.
pub fn colormap_lut() -> [[u8; 3]; 256] {
    let mut lut = [[0u8; 3]; 256];
    for (i, entry) in lut.iter_mut().enumerate() {
        let t = i as f32 / 255.0 * 2.0;
        let (a, b, f) = if t <= 1.0 {
            (COLORMAP_ANCHORS[0], COLORMAP_ANCHORS[1], t)
        } else {
            (COLORMAP_ANCHORS[1], COLORMAP_ANCHORS[2], t - 1.0)
        };
        for c in 0..3 {
            entry[c] = (f32::from(a[c]) * (1.0 - f) + f32::from(b[c]) * f).round() as u8;
        }
    }
    lut
}

/// Interleaved 8-bit RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// `(1 - alpha) * image + alpha * colormap(map)`. `image` is planar `[c, h, w]`
/// in `[0, 1]` with one (replicated to grey) or three channels.
pub fn overlay(map: &ActivationMap, image: &[f32], shape: [usize; 3], alpha: f32) -> Result<RgbImage> {
    let [c, h, w] = shape;
    if (h, w) != (map.height, map.width) || image.len() != c * h * w || !matches!(c, 1 | 3) {
        return Err(Error::shape(
            "overlay",
            format!("map {}x{} vs image {shape:?}", map.height, map.width),
        ));
    }
    let lut = colormap_lut();
    let plane = h * w;
    let mut data = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        let colour = lut[(map.values[p].clamp(0.0, 1.0) * 255.0).round() as usize];
        for ch in 0..3 {
            let src = image[if c == 1 { p } else { ch * plane + p }].clamp(0.0, 1.0) * 255.0;
            data.push(((1.0 - alpha) * src + alpha * f32::from(colour[ch])).round() as u8);
        }
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data,
    })
}

/// Writes a PNG.
pub fn write_image(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer_with_format(
        path,
        &img.data,
        img.width as u32,
        img.height as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?.to_rgb8();
    Ok(RgbImage {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.into_raw(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Tensor;
    use proptest::prelude::*;

    /// A trace whose class capsules have the given lengths (along the first axis).
    fn trace(n: usize, coupling: Vec<f64>, lengths: &[f64]) -> RoutingTrace<f64> {
        let m = lengths.len();
        let mut caps = vec![0.0; m * 2];
        for (j, &p) in lengths.iter().enumerate() {
            caps[j * 2] = p;
        }
        RoutingTrace {
            capsules: Tensor::from_vec(&[1, m, 2], caps).unwrap(),
            coupling: Tensor::from_vec(&[1, n, m], coupling).unwrap(),
        }
    }

    fn geo(c: usize, h: usize, w: usize, d: usize) -> MapGeometry {
        MapGeometry {
            channels: c,
            height: h,
            width: w,
            capsule_dim: d,
        }
    }

    #[test]
    fn two_site_hand_example() {
        let t = trace(2, vec![0.8, 0.2, 0.3, 0.7], &[1.0, 0.5]);
        let g = geo(1, 1, 2, 1);
        let raw = probam_raw(&t, 0, g).unwrap();
        assert!((raw[0] - 0.9).abs() < 1e-12 && (raw[1] - 0.65).abs() < 1e-12);
        let map = probam_map(&t, 0, g).unwrap();
        assert_eq!(map.values[0], 1.0);
        assert!((map.values[1] - 0.7222).abs() < 1e-4);
    }

    #[test]
    fn degenerate_traces() {
        let uniform = trace(4, vec![1.0; 4], &[1.0]);
        let g = geo(1, 2, 2, 1);
        assert_eq!(probam_raw(&uniform, 0, g).unwrap(), vec![1.0; 4]);
        assert_eq!(probam_map(&uniform, 0, g).unwrap().values, vec![1.0; 4]);
        let dead = trace(4, vec![0.5; 8], &[0.0, 0.0]);
        assert_eq!(probam_map(&dead, 0, g).unwrap().values, vec![0.0; 4]);
        assert!(probam_map(&dead, 0, geo(2, 2, 2, 1)).is_err());
        assert!(probam_map(&dead, 1, g).is_err());
    }

    #[test]
    fn slots_sum_into_sites() {
        // Two slots over a 1x2 map: capsules 0,1 are slot 0 and 2,3 slot 1.
        let t = trace(4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[0.5, 0.25]);
        let raw = probam_raw(&t, 0, geo(2, 1, 2, 1)).unwrap();
        assert_eq!(raw, vec![0.5 + 0.25, 0.5 + 0.5]);
    }

    #[test]
    fn conv1_cases() {
        let single: Vec<f32> = vec![0.0, 2.0, 4.0, 1.0];
        assert_eq!(conv1_map(&single, [1, 2, 2]).unwrap().values, vec![0.0, 0.5, 1.0, 0.25]);
        let opposite: Vec<f32> = single.iter().copied().chain(single.iter().map(|v| -v)).collect();
        assert_eq!(conv1_map(&opposite, [2, 2, 2]).unwrap().values, vec![0.0; 4]);
        assert_eq!(conv1_map(&[3.0; 4], [1, 2, 2]).unwrap().values, vec![0.0; 4]);
    }

    #[test]
    fn resize_cases() {
        let m = ActivationMap::new(2, 3, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        assert_eq!(resize(&m, 2, 3).unwrap(), m);
        let c = ActivationMap::new(2, 2, vec![0.3; 4]).unwrap();
        assert!(resize(&c, 5, 7).unwrap().values.iter().all(|&v| (v - 0.3).abs() < 1e-6));
        let checker = ActivationMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = resize(&checker, 4, 4).unwrap();
        for y in 1..3 {
            for x in 1..3 {
                assert!(up.at(y, x) > 0.0 && up.at(y, x) < 1.0);
            }
        }
        // Half-pixel centres: output (1,1) sits at source (0.25, 0.25).
        assert!((up.at(1, 1) - 0.375).abs() < 1e-6);
        assert_eq!(up.at(0, 0), 0.0);
        assert!(resize(&checker, 1, 4).is_err());
    }

    #[test]
    fn overlay_alphas() {
        let map = ActivationMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let img = [0.2f32, 0.8];
        let orig = overlay(&map, &img, [1, 1, 2], 0.0).unwrap();
        assert_eq!(orig.data, vec![51, 51, 51, 204, 204, 204]);
        let pure = overlay(&map, &img, [1, 1, 2], 1.0).unwrap();
        assert_eq!(pure.data, vec![0, 0, 255, 255, 0, 0]);
        let zero = ActivationMap::new(1, 2, vec![0.0; 2]).unwrap();
        let wash = overlay(&zero, &[0.0, 0.0], [1, 1, 2], 0.5).unwrap();
        assert_eq!(wash.data, vec![0, 0, 128, 0, 0, 128]);
        assert_eq!(colormap_lut()[0], [0, 0, 255]);
        assert_eq!(colormap_lut()[255], [255, 0, 0]);
        assert!(overlay(&map, &img, [1, 2, 1], 0.5).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for (i, (w, h)) in [(1, 1), (28, 56), (13, 7)].into_iter().enumerate() {
            let data: Vec<u8> = (0..w * h * 3).map(|k| ((k * 31 + i * 7) % 256) as u8).collect();
            let img = RgbImage { width: w, height: h, data };
            let path = dir.path().join(format!("{i}.png"));
            write_image(&img, &path).unwrap();
            assert_eq!(read_image(&path).unwrap(), img);
        }
        let bad = dir.path().join("missing").join("x.png");
        let err = write_image(&RgbImage { width: 1, height: 1, data: vec![0; 3] }, &bad).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }

    fn random_trace(n: usize, m: usize, seed: u64) -> RoutingTrace<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut c: Vec<f64> = (0..n * m).map(|_| rng.gen::<f64>()).collect();
        for row in c.chunks_mut(m) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let caps = (0..m * 2).map(|_| rng.gen_range(-0.7..0.7)).collect();
        RoutingTrace {
            capsules: Tensor::from_vec(&[1, m, 2], caps).unwrap(),
            coupling: Tensor::from_vec(&[1, n, m], c).unwrap(),
        }
    }

    proptest! {
        #[test]
        fn maps_are_nonnegative_and_bounded(seed in any::<u64>(), h in 1usize..4, w in 1usize..4) {
            let g = geo(4, h, w, 2);
            let t = random_trace(g.capsules(), 3, seed);
            prop_assert!(probam_raw(&t, 0, g).unwrap().iter().all(|&v| v >= 0.0));
            let map = probam_map(&t, 0, g).unwrap();
            prop_assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn permuting_within_a_site_keeps_the_map(seed in any::<u64>()) {
            // Swapping the two slots' capsules of one site moves trace rows with them.
            let g = geo(2, 2, 2, 1);
            let t = random_trace(g.capsules(), 3, seed);
            let mut c = t.coupling.data().to_vec();
            let (a, b) = (1, 1 + 4);
            for j in 0..3 {
                c.swap(a * 3 + j, b * 3 + j);
            }
            let swapped = RoutingTrace {
                coupling: Tensor::from_vec(&[1, 8, 3], c).unwrap(),
                ..t.clone()
            };
            let (m1, m2) = (probam_raw(&t, 0, g).unwrap(), probam_raw(&swapped, 0, g).unwrap());
            for (x, y) in m1.iter().zip(&m2) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn concentrated_mass_peaks_at_its_site(site in 0usize..6) {
            let g = geo(1, 2, 3, 1);
            let mut c = vec![0.0; 6 * 2];
            c[site * 2] = 1.0;
            let t = trace(6, c, &[0.9, 0.1]);
            let map = probam_map(&t, 0, g).unwrap();
            prop_assert_eq!(map.values[site], 1.0);
        }

        #[test]
        fn conv1_is_linear_before_normalization(a in proptest::collection::vec(-2.0f32..2.0, 8), b in proptest::collection::vec(-2.0f32..2.0, 8), k in -3.0f32..3.0) {
            let shape = [2, 2, 2];
            let mix: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + k * y).collect();
            let (ra, rb, rm) = (conv1_raw(&a, shape).unwrap(), conv1_raw(&b, shape).unwrap(), conv1_raw(&mix, shape).unwrap());
            for i in 0..4 {
                prop_assert!((rm[i] - (ra[i] + f64::from(k) * rb[i])).abs() < 1e-4);
            }
        }
    }
}
