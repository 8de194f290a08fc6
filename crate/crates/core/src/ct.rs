//! Shared CT domain types: rasters, acquisition geometry, sinograms and the
//! image-to-field coordinate map.
//!
//! Conventions used throughout the crate:
//!
//! * The reconstruction square spans `[-1, 1]²` in field units, so one image
//!   pixel is `2 / W` wide and the default stripe width equals one detector
//!   pixel.
//! * A parallel view at angle θ has detector axis `u = (cos θ, sin θ)` and
//!   ray direction `d = (-sin θ, cos θ)`; detector offsets live on `u`.
//! * A fan view places the source at `(dso·sin θ, -dso·cos θ)` firing through
//!   the origin, with equiangular detector bins.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtError {
    #[error("padding must be nonnegative, got {0}")]
    NegativePadding(f64),
    #[error("raster must be at least 2x2, got {0}x{1}")]
    RasterTooSmall(usize, usize),
    #[error("raster data length {len} does not match {w}x{h}")]
    RasterLenMismatch { w: usize, h: usize, len: usize },
    #[error("requested {requested} views but only {available} are available")]
    BadViewCount { requested: usize, available: usize },
    #[error("geometry has no detector bins")]
    NoDetectors,
    #[error("detector index {k} out of range for {count} bins")]
    DetectorOutOfRange { k: usize, count: usize },
    #[error("view angles must be strictly increasing within {range}")]
    BadAngles { range: &'static str },
    #[error("fan distances invalid: source-to-center {dso}, source-to-detector {sdd}")]
    BadFanDistances { dso: f64, sdd: f64 },
    #[error("sinogram values length {len} does not match {k} detectors x {v} views")]
    SinogramLenMismatch { k: usize, v: usize, len: usize },
    #[error("sinogram contains non-finite values")]
    NonFiniteSinogram,
    #[error("noise std must be nonnegative, got {0}")]
    NegativeNoise(f64),
}

/// W x H scalar image over the `[-1, 1]²` field square, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, CtError> {
        if width < 2 || height < 2 {
            return Err(CtError::RasterTooSmall(width, height));
        }
        if data.len() != width * height {
            return Err(CtError::RasterLenMismatch { w: width, h: height, len: data.len() });
        }
        Ok(Raster { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Raster::new(width, height, vec![0.0; width * height]).expect("valid zero raster")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, col: usize, row: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Min-max normalize into [0, 1]; returns the original range alongside
    /// so metric code can keep the physical data range.
    pub fn normalized(&self) -> (Raster, (f32, f32)) {
        let (lo, hi) = self.min_max();
        let scale = if hi > lo { 1.0 / (hi - lo) } else { 0.0 };
        let data = self.data.iter().map(|&v| (v - lo) * scale).collect();
        (
            Raster { width: self.width, height: self.height, data },
            (lo, hi),
        )
    }

    /// Field coordinates of a pixel center.
    pub fn pixel_center(&self, col: usize, row: usize) -> FieldCoord {
        normalize_coordinate(
            (col as f64 + 0.5, row as f64 + 0.5),
            self.width,
            self.height,
            0.0,
        )
        .expect("zero padding is valid")
    }

    /// Bilinear sample at a field point; zero outside the image square.
    pub fn sample_field(&self, x: f64, y: f64) -> f64 {
        let w = self.width as f64;
        let h = self.height as f64;
        // continuous pixel coordinates of the sample relative to pixel centers
        let px = (x + 1.0) * w / 2.0 - 0.5;
        let py = (y + 1.0) * h / 2.0 - 0.5;
        let ix = px.floor();
        let iy = py.floor();
        let fx = px - ix;
        let fy = py - iy;
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            let row = iy as i64 + dy;
            if row < 0 || row >= self.height as i64 || wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                let col = ix as i64 + dx;
                if col < 0 || col >= self.width as i64 || wx == 0.0 {
                    continue;
                }
                acc += wy * wx * self.data[row as usize * self.width + col as usize] as f64;
            }
        }
        acc
    }
}

/// Beam configuration; fan distances are in field units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beam {
    Parallel,
    Fan { source_to_center: f64, source_to_detector: f64 },
}

impl Beam {
    pub fn is_fan(&self) -> bool {
        matches!(self, Beam::Fan { .. })
    }
}

/// Acquisition geometry. `span` is the full detector extent: lateral width in
/// field units for parallel beams, full fan angle in radians for fan beams.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub beam: Beam,
    pub detector_count: usize,
    pub span: f64,
    pub angles: Vec<f64>,
}

impl Geometry {
    pub fn new(beam: Beam, detector_count: usize, span: f64, angles: Vec<f64>) -> Result<Self, CtError> {
        if detector_count == 0 {
            return Err(CtError::NoDetectors);
        }
        if let Beam::Fan { source_to_center, source_to_detector } = beam {
            if !(source_to_center > 0.0 && source_to_detector > source_to_center) {
                return Err(CtError::BadFanDistances {
                    dso: source_to_center,
                    sdd: source_to_detector,
                });
            }
        }
        let limit = if beam.is_fan() { 2.0 * std::f64::consts::PI } else { std::f64::consts::PI };
        let range = if beam.is_fan() { "[0, 2pi)" } else { "[0, pi)" };
        for (i, &a) in angles.iter().enumerate() {
            let ok = a >= 0.0 && a < limit && (i == 0 || a > angles[i - 1]);
            if !ok {
                return Err(CtError::BadAngles { range });
            }
        }
        Ok(Geometry { beam, detector_count, span, angles })
    }

    pub fn parallel(detector_count: usize, n_views: usize) -> Result<Self, CtError> {
        let angles = (0..n_views)
            .map(|i| i as f64 * std::f64::consts::PI / n_views as f64)
            .collect();
        Geometry::new(Beam::Parallel, detector_count, 2.0, angles)
    }

    /// Full-scan equiangular fan geometry whose rays cover the inscribed
    /// unit circle.
    pub fn fan(detector_count: usize, n_views: usize, dso: f64, sdd: f64) -> Result<Self, CtError> {
        let span = 2.0 * (1.0 / dso).asin();
        let angles = (0..n_views)
            .map(|i| i as f64 * 2.0 * std::f64::consts::PI / n_views as f64)
            .collect();
        Geometry::new(
            Beam::Fan { source_to_center: dso, source_to_detector: sdd },
            detector_count,
            span,
            angles,
        )
    }

    pub fn view_count(&self) -> usize {
        self.angles.len()
    }

    /// Bin pitch: field units (parallel) or radians (fan).
    pub fn pitch(&self) -> f64 {
        self.span / self.detector_count as f64
    }

    /// Lateral detector offset of bin k for parallel beams, or the bin angle
    /// relative to the central ray for fan beams.
    pub fn bin_center(&self, k: usize) -> f64 {
        -self.span / 2.0 + (k as f64 + 0.5) * self.pitch()
    }

    /// Stripe width of one detector pixel measured at the field center.
    pub fn detector_pixel_width(&self) -> f64 {
        match self.beam {
            Beam::Parallel => self.pitch(),
            Beam::Fan { source_to_center, .. } => self.pitch() * source_to_center,
        }
    }

    /// Source position for fan views.
    pub fn source_position(&self, theta: f64) -> [f64; 2] {
        match self.beam {
            Beam::Parallel => panic!("parallel geometry has no source point"),
            Beam::Fan { source_to_center, .. } => {
                [source_to_center * theta.sin(), -source_to_center * theta.cos()]
            }
        }
    }
}

/// detector_count x view_count projection values plus geometry.
/// Stored view-major in memory; the CPS1 file layout is detector-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: Geometry,
    values: Vec<f32>,
}

impl Sinogram {
    pub fn new(geometry: Geometry, values: Vec<f32>) -> Result<Self, CtError> {
        let k = geometry.detector_count;
        let v = geometry.view_count();
        if values.len() != k * v {
            return Err(CtError::SinogramLenMismatch { k, v, len: values.len() });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(CtError::NonFiniteSinogram);
        }
        Ok(Sinogram { geometry, values })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn at(&self, k: usize, view: usize) -> f32 {
        self.values[view * self.geometry.detector_count + k]
    }

    pub fn view(&self, view: usize) -> &[f32] {
        let k = self.geometry.detector_count;
        &self.values[view * k..(view + 1) * k]
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Point in field coordinates. Values produced by [`normalize_coordinate`]
/// lie in `(-1, 1)` per axis (closed at the boundary when padding is zero);
/// stripe samples near the field corners may extend beyond the unit square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldCoord {
    pub x: f64,
    pub y: f64,
}

impl FieldCoord {
    pub fn new(x: f64, y: f64) -> Self {
        debug_assert!(x.is_finite() && y.is_finite());
        FieldCoord { x, y }
    }
}

/// Map a pixel-space point into field coordinates:
/// `z = (2p - S) / (S + 2P)` per axis with axis size S and padding P.
pub fn normalize_coordinate(
    p: (f64, f64),
    width: usize,
    height: usize,
    padding: f64,
) -> Result<FieldCoord, CtError> {
    if padding < 0.0 {
        return Err(CtError::NegativePadding(padding));
    }
    let w = width as f64;
    let h = height as f64;
    Ok(FieldCoord::new(
        (2.0 * p.0 - w) / (w + 2.0 * padding),
        (2.0 * p.1 - h) / (h + 2.0 * padding),
    ))
}

/// Exact inverse of [`normalize_coordinate`].
pub fn denormalize_coordinate(
    z: FieldCoord,
    width: usize,
    height: usize,
    padding: f64,
) -> Result<(f64, f64), CtError> {
    if padding < 0.0 {
        return Err(CtError::NegativePadding(padding));
    }
    let w = width as f64;
    let h = height as f64;
    Ok((
        (z.x * (w + 2.0 * padding) + w) / 2.0,
        (z.y * (h + 2.0 * padding) + h) / 2.0,
    ))
}

/// Evenly strided subset of views. Angles follow the selected columns.
pub fn select_sparse_views(full: &Sinogram, n_views: usize) -> Result<Sinogram, CtError> {
    let available = full.geometry().view_count();
    if n_views == 0 || n_views > available {
        return Err(CtError::BadViewCount { requested: n_views, available });
    }
    let k = full.geometry().detector_count;
    let mut angles = Vec::with_capacity(n_views);
    let mut values = Vec::with_capacity(n_views * k);
    for i in 0..n_views {
        let v = i * available / n_views;
        angles.push(full.geometry().angles[v]);
        values.extend_from_slice(full.view(v));
    }
    let geometry = Geometry::new(full.geometry().beam, k, full.geometry().span, angles)?;
    Sinogram::new(geometry, values)
}

/// Add i.i.d. Gaussian noise with standard deviation `sigma`.
/// `sigma = 0` returns a bit-identical copy.
pub fn add_awgn(s: &Sinogram, sigma: f64, rng: &mut impl rand::Rng) -> Result<Sinogram, CtError> {
    if sigma < 0.0 {
        return Err(CtError::NegativeNoise(sigma));
    }
    if sigma == 0.0 {
        return Ok(s.clone());
    }
    let normal = rand_distr::Normal::new(0.0f64, sigma).expect("sigma validated");
    let values = s
        .values
        .iter()
        .map(|&v| {
            let noise: f64 = rand::Rng::sample(rng, normal);
            (v as f64 + noise) as f32
        })
        .collect();
    Sinogram::new(s.geometry.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn center_maps_to_origin() {
        let z = normalize_coordinate((256.0, 256.0), 512, 512, 0.0).unwrap();
        assert_eq!((z.x, z.y), (0.0, 0.0));
    }

    #[test]
    fn corner_maps_to_minus_one() {
        let z = normalize_coordinate((0.0, 0.0), 512, 512, 0.0).unwrap();
        assert_eq!((z.x, z.y), (-1.0, -1.0));
    }

    #[test]
    fn padding_shrinks_the_image() {
        let z = normalize_coordinate((0.0, 0.0), 512, 512, 64.0).unwrap();
        assert!((z.x + 0.8).abs() < 1e-15 && (z.y + 0.8).abs() < 1e-15);
    }

    #[test]
    fn negative_padding_rejected() {
        assert!(matches!(
            normalize_coordinate((0.0, 0.0), 512, 512, -1.0),
            Err(CtError::NegativePadding(_))
        ));
    }

    #[test]
    fn normalize_round_trips_exactly() {
        // affine map with power-of-two sizes round-trips to the last ulp
        for &(w, h, p) in &[(512usize, 512usize, 0.0f64), (128, 256, 16.0), (300, 200, 7.0)] {
            for &(px, py) in &[(0.0, 0.0), (17.25, 33.5), (w as f64, h as f64), (1.0, 199.0)] {
                let z = normalize_coordinate((px, py), w, h, p).unwrap();
                let (bx, by) = denormalize_coordinate(z, w, h, p).unwrap();
                assert!((bx - px).abs() <= f64::EPSILON * px.abs().max(1.0) * 2.0);
                assert!((by - py).abs() <= f64::EPSILON * py.abs().max(1.0) * 2.0);
            }
        }
    }

    #[test]
    fn normalize_is_monotone_per_axis() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let z = normalize_coordinate((i as f64, 0.0), 100, 100, 3.0).unwrap();
            assert!(z.x > prev);
            prev = z.x;
        }
    }

    fn dense_sino(views: usize) -> Sinogram {
        let g = Geometry::parallel(4, views).unwrap();
        let values = (0..4 * views).map(|i| i as f32).collect();
        Sinogram::new(g, values).unwrap()
    }

    #[test]
    fn select_all_views_is_identity() {
        let s = dense_sino(720);
        let sel = select_sparse_views(&s, 720).unwrap();
        assert_eq!(sel, s);
    }

    #[test]
    fn select_strided_views() {
        let s = dense_sino(720);
        let sel = select_sparse_views(&s, 30).unwrap();
        assert_eq!(sel.geometry().view_count(), 30);
        for (i, &a) in sel.geometry().angles.iter().enumerate() {
            let expect = (i * 24) as f64 * std::f64::consts::PI / 720.0;
            assert!((a - expect).abs() < 1e-12);
            assert_eq!(sel.view(i), s.view(i * 24));
        }
    }

    #[test]
    fn select_45_views_max_gap_enumerated() {
        let s = dense_sino(720);
        let sel = select_sparse_views(&s, 45).unwrap();
        let angles = &sel.geometry().angles;
        let mut max_gap = 0.0f64;
        for i in 0..angles.len() {
            let next = if i + 1 < angles.len() {
                angles[i + 1]
            } else {
                angles[0] + std::f64::consts::PI
            };
            max_gap = max_gap.max(next - angles[i]);
        }
        assert!((max_gap - std::f64::consts::PI / 45.0).abs() < 1e-12);
    }

    #[test]
    fn select_is_idempotent() {
        let s = dense_sino(720);
        let once = select_sparse_views(&s, 48).unwrap();
        let twice = select_sparse_views(&once, 48).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn select_too_many_views_rejected() {
        let s = dense_sino(10);
        assert!(matches!(
            select_sparse_views(&s, 11),
            Err(CtError::BadViewCount { .. })
        ));
    }

    #[test]
    fn awgn_zero_sigma_is_identity() {
        let s = dense_sino(16);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noisy = add_awgn(&s, 0.0, &mut rng).unwrap();
        assert_eq!(noisy, s);
    }

    #[test]
    fn awgn_is_deterministic_for_a_fixed_seed() {
        let s = dense_sino(16);
        let a = add_awgn(&s, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = add_awgn(&s, 0.05, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn awgn_empirical_std_matches() {
        let g = Geometry::parallel(1000, 1000).unwrap();
        let s = Sinogram::new(g, vec![0.0; 1_000_000]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let noisy = add_awgn(&s, 0.01, &mut rng).unwrap();
        let n = noisy.values().len() as f64;
        let mean: f64 = noisy.values().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = noisy.values().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((std - 0.01).abs() < 0.0002, "std {std}");
    }

    #[test]
    fn fan_geometry_validates_distances() {
        assert!(Geometry::fan(8, 8, 2.0, 1.0).is_err());
        assert!(Geometry::fan(8, 8, 2.0, 4.0).is_ok());
    }

    #[test]
    fn parallel_angles_must_stay_in_half_turn() {
        let bad = vec![0.0, 3.2];
        assert!(Geometry::new(Beam::Parallel, 4, 2.0, bad).is_err());
    }

    #[test]
    fn raster_rejects_bad_shapes() {
        assert!(Raster::new(1, 8, vec![0.0; 8]).is_err());
        assert!(Raster::new(4, 4, vec![0.0; 15]).is_err());
    }

    #[test]
    fn bilinear_sampling_interpolates() {
        let mut r = Raster::zeros(4, 4);
        r.set(1, 1, 1.0);
        let c = r.pixel_center(1, 1);
        assert!((r.sample_field(c.x, c.y) - 1.0).abs() < 1e-12);
        // halfway toward the next center the weight halves
        let c2 = r.pixel_center(2, 1);
        let mid = ((c.x + c2.x) / 2.0, c.y);
        assert!((r.sample_field(mid.0, mid.1) - 0.5).abs() < 1e-12);
        assert_eq!(r.sample_field(5.0, 0.0), 0.0);
    }
}
