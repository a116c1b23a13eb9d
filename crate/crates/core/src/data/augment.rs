//! Paired geometric augmentation.
//!
//! Every geometric transform (resize, flip, rotation, zoom, perspective warp)
//! is folded into one [`SourceMapping`] from output pixel to source
//! coordinates, which the image samples bilinearly and the mask samples with
//! nearest neighbour. Both therefore see identical geometry.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, SamplePair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    /// Rotation angle drawn uniformly from `[-limit, limit]` degrees.
    pub rotation_limit: f64,
    /// Scale factor drawn uniformly from `[min, max]`; values above 1 zoom in.
    pub zoom_range: (f64, f64),
    /// Brightness offset and contrast gain deviation, both drawn from
    /// `[-limit, limit]` on the `[0, 1]` intensity scale.
    pub brightness_contrast_limit: f64,
    /// Maximum displacement of each corner, as a fraction of the image side.
    pub warp_magnitude: f64,
    /// `(height, width)` of every augmented sample.
    pub target_size: (usize, usize),
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            rotation_limit: 30.0,
            zoom_range: (0.9, 1.1),
            brightness_contrast_limit: 0.2,
            warp_magnitude: 0.1,
            target_size: (256, 256),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Resize only: every random transform disabled.
    pub fn resize_only(target_size: (usize, usize)) -> Self {
        Self {
            flip_probability: 0.0,
            rotation_limit: 0.0,
            zoom_range: (1.0, 1.0),
            brightness_contrast_limit: 0.0,
            warp_magnitude: 0.0,
            target_size,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |msg: String| Err(DataError::Config(msg));
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return fail(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            ));
        }
        if !(self.rotation_limit >= 0.0 && self.rotation_limit <= 180.0) {
            return fail(format!(
                "rotation_limit must lie in [0, 180], got {}",
                self.rotation_limit
            ));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return fail(format!("zoom_range must satisfy 0 < min <= max, got ({lo}, {hi})"));
        }
        if !(0.0..1.0).contains(&self.brightness_contrast_limit) {
            return fail(format!(
                "brightness_contrast_limit must lie in [0, 1), got {}",
                self.brightness_contrast_limit
            ));
        }
        if !(0.0..0.5).contains(&self.warp_magnitude) {
            return fail(format!(
                "warp_magnitude must lie in [0, 0.5), got {}",
                self.warp_magnitude
            ));
        }
        let (h, w) = self.target_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return fail(format!("target_size must be positive multiples of 32, got ({h}, {w})"));
        }
        Ok(())
    }
}

/// One concrete draw of every augmentation parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub rotation_deg: f64,
    pub zoom: f64,
    pub brightness: f64,
    pub contrast: f64,
    /// Corner displacements `(dx, dy)` in fractions of the image side, for
    /// the corners top-left, top-right, bottom-right, bottom-left.
    pub warp: [[f64; 2]; 4],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            rotation_deg: 0.0,
            zoom: 1.0,
            brightness: 0.0,
            contrast: 1.0,
            warp: [[0.0; 2]; 4],
        }
    }

    /// Draw parameters from `config`. The same number of values is consumed
    /// from `rng` whatever the configuration.
    pub fn sample<R: Rng + ?Sized>(config: &AugmentationConfig, rng: &mut R) -> Self {
        let mut symmetric = |limit: f64| (2.0 * rng.random::<f64>() - 1.0) * limit;
        let flip_u = symmetric(1.0);
        let rotation_deg = symmetric(config.rotation_limit);
        let zoom_u = symmetric(1.0);
        let brightness = symmetric(config.brightness_contrast_limit);
        let contrast = 1.0 + symmetric(config.brightness_contrast_limit);
        let mut warp = [[0.0; 2]; 4];
        for corner in &mut warp {
            for d in corner.iter_mut() {
                *d = symmetric(config.warp_magnitude);
            }
        }
        let (lo, hi) = config.zoom_range;
        Self {
            flip: (flip_u + 1.0) / 2.0 < config.flip_probability,
            rotation_deg,
            zoom: lo + (zoom_u + 1.0) / 2.0 * (hi - lo),
            brightness,
            contrast,
            warp,
        }
    }
}

/// Output-pixel to source-coordinate map for one set of parameters.
///
/// Source coordinates are continuous with pixel `k` covering `[k, k + 1)`.
#[derive(Debug, Clone)]
pub struct SourceMapping {
    src_hw: (usize, usize),
    out_hw: (usize, usize),
    flip: bool,
    rotation: Option<(f64, f64)>,
    zoom: f64,
    homography: Option<[f64; 8]>,
}

impl SourceMapping {
    pub fn new(params: &AugmentParams, src_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let rotation = (params.rotation_deg != 0.0).then(|| {
            let t = params.rotation_deg.to_radians();
            (t.cos(), t.sin())
        });
        let homography = params
            .warp
            .iter()
            .any(|c| c[0] != 0.0 || c[1] != 0.0)
            .then(|| square_to_quad(&params.warp));
        Self {
            src_hw,
            out_hw,
            flip: params.flip,
            rotation,
            zoom: params.zoom,
            homography,
        }
    }

    /// Continuous `(y, x)` source position for output pixel `(row, col)`.
    pub fn source_coords(&self, row: usize, col: usize) -> (f64, f64) {
        let (ho, wo) = (self.out_hw.0 as f64, self.out_hw.1 as f64);
        let col = if self.flip { self.out_hw.1 - 1 - col } else { col };
        let mut ny = 2.0 * (row as f64 + 0.5) / ho - 1.0;
        let mut nx = 2.0 * (col as f64 + 0.5) / wo - 1.0;
        if let Some((c, s)) = self.rotation {
            let (x, y) = (nx * wo / 2.0, ny * ho / 2.0);
            nx = (c * x - s * y) / (wo / 2.0);
            ny = (s * x + c * y) / (ho / 2.0);
        }
        if self.zoom != 1.0 {
            nx /= self.zoom;
            ny /= self.zoom;
        }
        let (mut u, mut v) = ((nx + 1.0) / 2.0, (ny + 1.0) / 2.0);
        if let Some([a, b, c, d, e, f, g, h]) = self.homography {
            let w = g * u + h * v + 1.0;
            (u, v) = ((a * u + b * v + c) / w, (d * u + e * v + f) / w);
        }
        (v * self.src_hw.0 as f64, u * self.src_hw.1 as f64)
    }
}

/// Projective map of the unit square onto the quad whose corners are the
/// unit-square corners displaced by `offsets` (Heckbert's closed form).
/// Returns `[a, b, c, d, e, f, g, h]` with
/// `x = (a u + b v + c) / (g u + h v + 1)`, `y = (d u + e v + f) / (g u + h v + 1)`.
fn square_to_quad(offsets: &[[f64; 2]; 4]) -> [f64; 8] {
    const CORNERS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let p: Vec<[f64; 2]> = CORNERS
        .iter()
        .zip(offsets)
        .map(|(c, o)| [c[0] + o[0], c[1] + o[1]])
        .collect();
    let (x0, y0, x1, y1, x2, y2, x3, y3) = (p[0][0], p[0][1], p[1][0], p[1][1], p[2][0], p[2][1], p[3][0], p[3][1]);
    let (dx3, dy3) = (x0 - x1 + x2 - x3, y0 - y1 + y2 - y3);
    if dx3 == 0.0 && dy3 == 0.0 {
        return [x1 - x0, x2 - x1, x0, y1 - y0, y2 - y1, y0, 0.0, 0.0];
    }
    let (dx1, dx2, dy1, dy2) = (x1 - x2, x3 - x2, y1 - y2, y3 - y2);
    let det = dx1 * dy2 - dx2 * dy1;
    let g = (dx3 * dy2 - dx2 * dy3) / det;
    let h = (dx1 * dy3 - dx3 * dy1) / det;
    [
        x1 - x0 + g * x1,
        x3 - x0 + h * x3,
        x0,
        y1 - y0 + g * y1,
        y3 - y0 + h * y3,
        y0,
        g,
        h,
    ]
}

fn inside(v: f64, size: usize) -> bool {
    v >= 0.0 && v < size as f64
}

fn sample_nearest(mask: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = mask.dim();
    if inside(y, h) && inside(x, w) {
        u8::from(mask[[y as usize, x as usize]] > 0)
    } else {
        0
    }
}

fn sample_bilinear(image: &Array3<u8>, y: f64, x: f64) -> [f64; 3] {
    let (h, w, _) = image.dim();
    if !(inside(y, h) && inside(x, w)) {
        return [0.0; 3];
    }
    let (fy, fx) = (y - 0.5, x - 0.5);
    let (y0, x0) = (fy.floor(), fx.floor());
    let (ty, tx) = (fy - y0, fx - x0);
    let clamp = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
    let (ya, yb) = (clamp(y0, h), clamp(y0 + 1.0, h));
    let (xa, xb) = (clamp(x0, w), clamp(x0 + 1.0, w));
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = image[[ya, xa, c]] as f64 * (1.0 - tx) + image[[ya, xb, c]] as f64 * tx;
        let bottom = image[[yb, xa, c]] as f64 * (1.0 - tx) + image[[yb, xb, c]] as f64 * tx;
        *o = top * (1.0 - ty) + bottom * ty;
    }
    out
}

fn warp_image(image: &Array3<u8>, map: &SourceMapping, photometric: Option<(f64, f64)>) -> Array3<u8> {
    let (ho, wo) = map.out_hw;
    let mut out = Array3::<u8>::zeros((ho, wo, 3));
    for r in 0..ho {
        for c in 0..wo {
            let (y, x) = map.source_coords(r, c);
            let px = sample_bilinear(image, y, x);
            for (ch, v) in px.into_iter().enumerate() {
                let v = match photometric {
                    Some((b, k)) => ((v / 255.0 - 0.5) * k + 0.5 + b) * 255.0,
                    None => v,
                };
                out[[r, c, ch]] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn warp_mask(mask: &Array2<u8>, map: &SourceMapping) -> Array2<u8> {
    let (ho, wo) = map.out_hw;
    Array2::from_shape_fn((ho, wo), |(r, c)| {
        let (y, x) = map.source_coords(r, c);
        sample_nearest(mask, y, x)
    })
}

/// Apply a fixed set of parameters to a pair, producing a `target_size` pair.
pub fn apply_augmentation(pair: &SamplePair, params: &AugmentParams, target_size: (usize, usize)) -> SamplePair {
    let map = SourceMapping::new(params, (pair.height(), pair.width()), target_size);
    let photometric =
        (params.brightness != 0.0 || params.contrast != 1.0).then_some((params.brightness, params.contrast));
    SamplePair {
        id: pair.id.clone(),
        image: warp_image(&pair.image, &map, photometric),
        mask: warp_mask(&pair.mask, &map),
    }
}

/// Draw parameters from `rng` and apply them.
pub fn augment<R: Rng + ?Sized>(pair: &SamplePair, config: &AugmentationConfig, rng: &mut R) -> SamplePair {
    let params = AugmentParams::sample(config, rng);
    apply_augmentation(pair, &params, config.target_size)
}

/// Plain resize of both members (bilinear image, nearest mask).
pub fn resize_pair(pair: &SamplePair, target_size: (usize, usize)) -> SamplePair {
    apply_augmentation(pair, &AugmentParams::identity(), target_size)
}

pub fn resize_image(image: &Array3<u8>, target_size: (usize, usize)) -> Array3<u8> {
    let (h, w, _) = image.dim();
    let map = SourceMapping::new(&AugmentParams::identity(), (h, w), target_size);
    warp_image(image, &map, None)
}

pub fn resize_mask(mask: &Array2<u8>, target_size: (usize, usize)) -> Array2<u8> {
    let map = SourceMapping::new(&AugmentParams::identity(), mask.dim(), target_size);
    warp_mask(mask, &map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SMatrix, SVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(h: usize, w: usize, seed: u64) -> SamplePair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Array3::from_shape_fn((h, w, 3), |_| rng.random::<u8>());
        let mask = Array2::from_shape_fn((h, w), |_| u8::from(rng.random::<bool>()));
        SamplePair::new("p", image, mask).unwrap()
    }

    fn only(f: impl FnOnce(&mut AugmentationConfig)) -> AugmentationConfig {
        let mut c = AugmentationConfig::resize_only((64, 96));
        f(&mut c);
        c
    }

    /// Independent oracle: the source position of an output pixel, built from
    /// explicit matrices rather than the incremental mapping above.
    fn oracle_coords(p: &AugmentParams, src: (usize, usize), out: (usize, usize), r: usize, c: usize) -> (f64, f64) {
        let (ho, wo) = (out.0 as f64, out.1 as f64);
        // pixel-centred position relative to the output centre, in output pixels
        let mut x = c as f64 + 0.5 - wo / 2.0;
        let y = r as f64 + 0.5 - ho / 2.0;
        if p.flip {
            x = -x;
        }
        let t = p.rotation_deg.to_radians();
        let rot = nalgebra::Matrix2::new(t.cos(), -t.sin(), t.sin(), t.cos());
        let q = rot * nalgebra::Vector2::new(x, y) / p.zoom;
        // fraction of the output frame
        let u = q.x / wo + 0.5;
        let v = q.y / ho + 0.5;
        // homography through an 8x8 linear solve on the four corner pairs
        let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for k in 0..4 {
            let (s, t) = (corners[k][0], corners[k][1]);
            let (dx, dy) = (s + p.warp[k][0], t + p.warp[k][1]);
            a.set_row(
                2 * k,
                &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[s, t, 1.0, 0.0, 0.0, 0.0, -s * dx, -t * dx]),
            );
            a.set_row(
                2 * k + 1,
                &nalgebra::RowSVector::<f64, 8>::from_row_slice(&[0.0, 0.0, 0.0, s, t, 1.0, -s * dy, -t * dy]),
            );
            b[2 * k] = dx;
            b[2 * k + 1] = dy;
        }
        let m = a.lu().solve(&b).unwrap();
        let w = m[6] * u + m[7] * v + 1.0;
        let su = (m[0] * u + m[1] * v + m[2]) / w;
        let sv = (m[3] * u + m[4] * v + m[5]) / w;
        (sv * src.0 as f64, su * src.1 as f64)
    }

    fn near_boundary(v: f64, size: usize) -> bool {
        (v - v.round()).abs() < 1e-6 || v.abs() < 1e-6 || (v - size as f64).abs() < 1e-6
    }

    /// Every output mask pixel equals the nearest source pixel under the
    /// oracle geometry, except where the oracle lands within rounding noise
    /// of a pixel boundary.
    fn assert_mask_matches_oracle(pair: &SamplePair, p: &AugmentParams, out: (usize, usize)) {
        let got = apply_augmentation(pair, p, out).mask;
        let src = pair.mask.dim();
        for r in 0..out.0 {
            for c in 0..out.1 {
                let (y, x) = oracle_coords(p, src, out, r, c);
                if near_boundary(y, src.0) || near_boundary(x, src.1) {
                    continue;
                }
                let expected = if y >= 0.0 && x >= 0.0 && y < src.0 as f64 && x < src.1 as f64 {
                    pair.mask[[y as usize, x as usize]]
                } else {
                    0
                };
                assert_eq!(got[[r, c]], expected, "pixel ({r}, {c}) params {p:?}");
            }
        }
    }

    #[test]
    fn default_config_is_valid() {
        AugmentationConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(only(|c| c.flip_probability = 1.5).validate().is_err());
        assert!(only(|c| c.zoom_range = (1.2, 1.1)).validate().is_err());
        assert!(only(|c| c.target_size = (100, 96)).validate().is_err());
        assert!(only(|c| c.warp_magnitude = -0.1).validate().is_err());
    }

    #[test]
    fn identity_config_equals_resize() {
        let pair = random_pair(37, 53, 1);
        let cfg = AugmentationConfig::resize_only((64, 96));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&pair, &cfg, &mut rng);
        assert_eq!(out, resize_pair(&pair, (64, 96)));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let pair = random_pair(32, 64, 2);
        assert_eq!(resize_pair(&pair, (32, 64)), pair);
    }

    #[test]
    fn certain_flip_mirrors_the_resized_pair() {
        let pair = random_pair(37, 53, 3);
        let cfg = only(|c| c.flip_probability = 1.0);
        let out = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let resized = resize_pair(&pair, (64, 96));
        let mut flipped_mask = resized.mask.clone();
        flipped_mask.invert_axis(ndarray::Axis(1));
        let mut flipped_image = resized.image.clone();
        flipped_image.invert_axis(ndarray::Axis(1));
        assert_eq!(out.mask, flipped_mask);
        assert_eq!(out.image, flipped_image);
    }

    #[test]
    fn photometric_only_leaves_mask_untouched() {
        let pair = random_pair(64, 96, 4);
        let cfg = only(|c| c.brightness_contrast_limit = 0.5);
        for seed in 0..10 {
            let out = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(out.mask, pair.mask);
        }
    }

    #[test]
    fn photometric_formula() {
        let image = Array3::from_shape_vec((1, 2, 3), vec![0, 64, 128, 192, 255, 10]).unwrap();
        let pair = SamplePair::new("x", image.clone(), Array2::zeros((1, 2))).unwrap();
        let mut p = AugmentParams::identity();
        p.brightness = 0.1;
        p.contrast = 1.2;
        let out = apply_augmentation(&pair, &p, (1, 2));
        for (o, i) in out.image.iter().zip(image.iter()) {
            let expected = ((*i as f64 / 255.0 - 0.5) * 1.2 + 0.6) * 255.0;
            assert_eq!(*o, expected.round().clamp(0.0, 255.0) as u8);
        }
    }

    #[test]
    fn same_seed_same_output() {
        let pair = random_pair(40, 40, 6);
        let cfg = AugmentationConfig {
            target_size: (64, 64),
            ..Default::default()
        };
        let a = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let b = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
        let c = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(12));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn heckbert_matches_linear_solve() {
        let warp = [[0.05, -0.02], [-0.08, 0.03], [0.01, 0.09], [0.04, -0.06]];
        let [a, b, c, d, e, f, g, h] = square_to_quad(&warp);
        let corners = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        for (k, [u, v]) in corners.into_iter().enumerate() {
            let w = g * u + h * v + 1.0;
            assert!(((a * u + b * v + c) / w - (u + warp[k][0])).abs() < 1e-12);
            assert!(((d * u + e * v + f) / w - (v + warp[k][1])).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_helpers_agree_with_pair_resize() {
        let pair = random_pair(30, 20, 7);
        let r = resize_pair(&pair, (64, 32));
        assert_eq!(resize_image(&pair.image, (64, 32)), r.image);
        assert_eq!(resize_mask(&pair.mask, (64, 32)), r.mask);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rotation_commutes_with_mask(angle in -30.0f64..30.0, seed in 0u64..1000) {
            let pair = random_pair(41, 29, seed);
            let p = AugmentParams { rotation_deg: angle, ..AugmentParams::identity() };
            assert_mask_matches_oracle(&pair, &p, (64, 96));
        }

        #[test]
        fn zoom_commutes_with_mask(zoom in 0.8f64..1.25, seed in 0u64..1000) {
            let pair = random_pair(41, 29, seed);
            let p = AugmentParams { zoom, ..AugmentParams::identity() };
            assert_mask_matches_oracle(&pair, &p, (64, 96));
        }

        #[test]
        fn flip_commutes_with_mask(seed in 0u64..1000) {
            let pair = random_pair(41, 29, seed);
            let p = AugmentParams { flip: true, ..AugmentParams::identity() };
            assert_mask_matches_oracle(&pair, &p, (64, 96));
        }

        #[test]
        fn resize_commutes_with_mask(h in 5usize..80, w in 5usize..80, seed in 0u64..1000) {
            let pair = random_pair(h, w, seed);
            assert_mask_matches_oracle(&pair, &AugmentParams::identity(), (64, 96));
        }

        #[test]
        fn warp_commutes_with_mask(offsets in proptest::array::uniform8(-0.1f64..0.1), seed in 0u64..1000) {
            let pair = random_pair(41, 29, seed);
            let mut warp = [[0.0; 2]; 4];
            for (k, o) in offsets.iter().enumerate() {
                warp[k / 2][k % 2] = *o;
            }
            let p = AugmentParams { warp, ..AugmentParams::identity() };
            assert_mask_matches_oracle(&pair, &p, (64, 96));
        }

        #[test]
        fn full_pipeline_commutes_and_stays_binary(seed in 0u64..10_000) {
            let pair = random_pair(41, 29, seed);
            let cfg = AugmentationConfig { target_size: (64, 96), ..Default::default() };
            let p = AugmentParams::sample(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            let out = apply_augmentation(&pair, &p, (64, 96));
            prop_assert!(out.mask.iter().all(|&v| v <= 1));
            assert_mask_matches_oracle(&pair, &p, (64, 96));
        }

        #[test]
        fn masks_with_arbitrary_foreground_values_come_out_binary(seed in 0u64..1000) {
            let mut pair = random_pair(20, 20, seed);
            pair.mask.mapv_inplace(|v| v * 200);
            let cfg = AugmentationConfig { target_size: (32, 32), ..Default::default() };
            let out = augment(&pair, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert!(out.mask.iter().all(|&v| v <= 1));
        }
    }
}
