//! Seeded synthetic storm sequences with region-dependent statistics.
//!
//! Events are built from a latent field of Gaussian storm cells advected
//! across the frame window. The rain rate is the rectified latent scaled by
//! the region's intensity, with the rectification cutoff placed so that the
//! binarized rain fraction calibrates to the region's target. The 11 input
//! channels are fixed nonlinear transforms of the latent field plus seeded
//! noise; generation is a pure function of `(seed, profile, dims)`.

mod container;

pub use container::{read_array, read_dataset, write_array, write_dataset, MAGIC as ARRAY_MAGIC};

use ndarray::{Array1, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::rng;
use crate::Result;

/// Rain threshold the generator calibrates against (stage-2 task value).
pub const DEFAULT_RAIN_THRESHOLD: f64 = 0.2;

/// Number of spectral input channels.
pub const NUM_CHANNELS: usize = 11;

/// Dataset container format version.
pub const FORMAT_VERSION: &str = "1";

/// Per-region generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionProfile {
    pub region_id: u32,
    pub name: String,
    /// Target fraction of rain pixels in binarized outputs, in (0, 1).
    pub rain_fraction_target: f64,
    /// Storm drift in (rows, cols) pixels per frame.
    pub advection_velocity: (f64, f64),
    /// Rain-rate scale; zero yields an all-dry region.
    pub intensity_scale: f64,
}

impl RegionProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.rain_fraction_target > 0.0 && self.rain_fraction_target < 1.0) {
            return Err(CoreError::invalid(format!(
                "rain_fraction_target must lie in (0,1), got {}",
                self.rain_fraction_target
            )));
        }
        if !(self.intensity_scale >= 0.0 && self.intensity_scale.is_finite()) {
            return Err(CoreError::invalid(format!(
                "intensity_scale must be finite and >= 0, got {}",
                self.intensity_scale
            )));
        }
        Ok(())
    }
}

/// Grid dimensions shared by a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridDims {
    pub channels: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub height: usize,
    pub width: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl GridDims {
    /// Default competition-shaped dims at a configurable spatial size.
    pub fn with_spatial(height: usize, width: usize) -> Self {
        GridDims {
            channels: NUM_CHANNELS,
            t_in: 4,
            t_out: 32,
            height,
            width,
            out_height: height,
            out_width: width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("t_in", self.t_in),
            ("t_out", self.t_out),
            ("height", self.height),
            ("width", self.width),
            ("out_height", self.out_height),
            ("out_width", self.out_width),
        ] {
            if v == 0 {
                return Err(CoreError::invalid(format!("dimension {name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Input radiance tensor `[C][T_in][H][W]`; all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralSequence {
    pub values: Array4<f32>,
}

impl SpectralSequence {
    pub fn new(values: Array4<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::invalid("spectral sequence contains non-finite values"));
        }
        Ok(SpectralSequence { values })
    }
}

/// Continuous rain rates `[T_out][H_out][W_out]`; nonnegative and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct RainRateField {
    pub rates: Array3<f32>,
}

impl RainRateField {
    pub fn new(rates: Array3<f32>) -> Result<Self> {
        if rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::invalid(
                "rain rates must be finite and nonnegative",
            ));
        }
        Ok(RainRateField { rates })
    }
}

/// Binary rain mask `[T_out][H_out][W_out]` with entries in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct RainMask {
    pub mask: Array3<u8>,
}

impl RainMask {
    pub fn new(mask: Array3<u8>) -> Result<Self> {
        if mask.iter().any(|&m| m > 1) {
            return Err(CoreError::invalid("rain mask entries must be 0 or 1"));
        }
        Ok(RainMask { mask })
    }

    pub fn rain_fraction(&self) -> f64 {
        let total = self.mask.len();
        if total == 0 {
            return 0.0;
        }
        let rain: u64 = self.mask.iter().map(|&m| u64::from(m)).sum();
        rain as f64 / total as f64
    }
}

/// One generated event keyed by (region, year, sample).
#[derive(Debug, Clone)]
pub struct Sample {
    pub region_id: u32,
    pub year: i32,
    pub sample_id: u32,
    pub x: SpectralSequence,
    pub rates: RainRateField,
}

/// Index entry for a sample in the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleKey {
    pub region_id: u32,
    pub year: i32,
    pub sample_id: u32,
}

/// On-disk dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub num_regions: u32,
    pub years: Vec<i32>,
    pub dims: GridDims,
    pub rain_threshold: f64,
    pub regions: Vec<RegionProfile>,
    pub samples: Vec<SampleKey>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(CoreError::format(format!(
                "manifest field format_version: expected {FORMAT_VERSION:?}, got {:?}",
                self.format_version
            )));
        }
        if self.rain_threshold <= 0.0 {
            return Err(CoreError::format(format!(
                "manifest field rain_threshold: must be positive, got {}",
                self.rain_threshold
            )));
        }
        self.dims.validate()?;
        let mut ids: Vec<u32> = self.regions.iter().map(|p| p.region_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.regions.len() {
            return Err(CoreError::format(
                "manifest field regions: duplicate region_id".to_string(),
            ));
        }
        Ok(())
    }

    pub fn profile(&self, region_id: u32) -> Option<&RegionProfile> {
        self.regions.iter().find(|p| p.region_id == region_id)
    }
}

/// A full in-memory dataset: manifest plus sample arrays.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

/// The seven stage-2 regions. Rain fractions for the three `boxi` regions
/// follow the published statistics; the rest are plausible in-range values.
pub fn default_profiles(count: usize) -> Vec<RegionProfile> {
    let base: [(&str, f64, (f64, f64), f64); 7] = [
        ("boxi0015", 0.190, (0.6, 1.1), 8.0),
        ("boxi0034", 0.190, (-0.8, 0.7), 6.0),
        ("boxi0076", 0.108, (0.3, -1.2), 9.0),
        ("roxi0004", 0.160, (1.0, 0.2), 7.0),
        ("roxi0005", 0.140, (-0.5, -0.9), 8.5),
        ("roxi0006", 0.210, (0.9, -0.4), 5.5),
        ("roxi0007", 0.125, (-1.1, 0.5), 7.5),
    ];
    (0..count)
        .map(|i| {
            if i < base.len() {
                let (name, frac, vel, scale) = base[i];
                RegionProfile {
                    region_id: i as u32,
                    name: name.to_string(),
                    rain_fraction_target: frac,
                    advection_velocity: vel,
                    intensity_scale: scale,
                }
            } else {
                RegionProfile {
                    region_id: i as u32,
                    name: format!("synth{i:04}"),
                    rain_fraction_target: 0.10 + 0.02 * ((i % 9) as f64),
                    advection_velocity: (((i % 5) as f64 - 2.0) * 0.5, ((i % 3) as f64 - 1.0) * 0.7),
                    intensity_scale: 6.0 + (i % 4) as f64,
                }
            }
        })
        .collect()
}

struct StormCell {
    y0: f64,
    x0: f64,
    vy: f64,
    vx: f64,
    sigma: f64,
    amplitude: f64,
    peak_frame: f64,
    duration: f64,
}

/// Latent storm field over all `t_in + t_out` frames.
fn latent_field(rng: &mut ChaCha8Rng, profile: &RegionProfile, dims: &GridDims) -> Array3<f64> {
    let frames = dims.t_in + dims.t_out;
    let (h, w) = (dims.height, dims.width);
    let sigma_max = 2.0 + (h.min(w) as f64) / 6.0;
    let n_cells = 4 + rng.random_range(0..=2) + (h * w) / 200;
    let (adv_y, adv_x) = profile.advection_velocity;
    let pad = (3.0 * sigma_max).ceil();
    let mid = frames as f64 / 2.0;

    // Cells are placed by their mid-sequence position so advection keeps
    // them relevant across the whole window rather than drifting a padded
    // spawn region past the frame.
    let cells: Vec<StormCell> = (0..n_cells)
        .map(|_| {
            let y_mid = rng.random_range(-pad..h as f64 + pad);
            let x_mid = rng.random_range(-pad..w as f64 + pad);
            let vy = adv_y + rng.random_range(-0.25..0.25);
            let vx = adv_x + rng.random_range(-0.25..0.25);
            StormCell {
                y0: y_mid - vy * mid,
                x0: x_mid - vx * mid,
                vy,
                vx,
                sigma: rng.random_range(2.0..sigma_max.max(2.5)),
                amplitude: rng.random_range(0.6..1.4),
                peak_frame: rng.random_range(0.0..frames as f64),
                duration: rng.random_range(frames as f64 * 0.5..frames as f64 * 1.5),
            }
        })
        .collect();

    let mut latent = Array3::<f64>::zeros((frames, h, w));
    for cell in &cells {
        for t in 0..frames {
            let tf = t as f64;
            let life = (-((tf - cell.peak_frame) / cell.duration).powi(2)).exp();
            let amp = cell.amplitude * life;
            let cy = cell.y0 + cell.vy * tf;
            let cx = cell.x0 + cell.vx * tf;
            let reach = 3.5 * cell.sigma;
            let y_lo = ((cy - reach).floor().max(0.0)) as usize;
            let y_hi = ((cy + reach).ceil().min(h as f64 - 1.0)) as usize;
            let x_lo = ((cx - reach).floor().max(0.0)) as usize;
            let x_hi = ((cx + reach).ceil().min(w as f64 - 1.0)) as usize;
            if cy + reach < 0.0 || cx + reach < 0.0 || cy - reach > h as f64 || cx - reach > w as f64
            {
                continue;
            }
            let inv = 1.0 / (2.0 * cell.sigma * cell.sigma);
            for y in y_lo..=y_hi {
                let dy = y as f64 - cy;
                for x in x_lo..=x_hi {
                    let dx = x as f64 - cx;
                    latent[[t, y, x]] += amp * (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
    }
    latent
}

/// Generates one event: input spectral sequence plus future rain rates.
///
/// Deterministic in `(seed, profile, dims)`; the binarized rain fraction
/// calibrates to `profile.rain_fraction_target` at the default 0.2 rain
/// threshold.
pub fn generate_event(
    seed: u64,
    profile: &RegionProfile,
    dims: &GridDims,
) -> Result<(SpectralSequence, RainRateField)> {
    dims.validate()?;
    profile.validate()?;
    if dims.channels != NUM_CHANNELS {
        return Err(CoreError::invalid(format!(
            "generator produces exactly {NUM_CHANNELS} channels, manifest asks for {}",
            dims.channels
        )));
    }
    if dims.out_height != dims.height || dims.out_width != dims.width {
        return Err(CoreError::invalid(
            "generator requires out_height == height and out_width == width",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latent = latent_field(&mut rng, profile, dims);

    // Rain rates over the output window: rectified latent, with the cutoff
    // placed at the (1 - target) quantile so the fraction of pixels at or
    // above the 0.2 rain threshold lands on the profile target.
    let (h, w) = (dims.height, dims.width);
    let n_out = dims.t_out * h * w;
    let mut rates = Array3::<f32>::zeros((dims.t_out, h, w));
    if profile.intensity_scale > 0.0 {
        let mut vals: Vec<f64> = Vec::with_capacity(n_out);
        for t in 0..dims.t_out {
            for y in 0..h {
                for x in 0..w {
                    vals.push(latent[[dims.t_in + t, y, x]]);
                }
            }
        }
        // Per-event jitter around the profile target; the long-run mean
        // stays on target while individual events vary.
        let event_fraction =
            (profile.rain_fraction_target * rng.random_range(0.75..1.25)).clamp(0.005, 0.9);
        let rank = ((1.0 - event_fraction) * n_out as f64).floor() as usize;
        let rank = rank.min(n_out - 1);
        let (_, q, _) = vals.select_nth_unstable_by(rank, |a, b| a.partial_cmp(b).unwrap());
        let cutoff = *q - DEFAULT_RAIN_THRESHOLD / profile.intensity_scale;
        for t in 0..dims.t_out {
            for y in 0..h {
                for x in 0..w {
                    let r = (latent[[dims.t_in + t, y, x]] - cutoff).max(0.0)
                        * profile.intensity_scale;
                    rates[[t, y, x]] = r as f32;
                }
            }
        }
    }

    // 11 channels: latent, latent², √latent, three spatial shifts, three
    // temporal lags, two pure-noise decoys; each plus Gaussian noise.
    let noise = Normal::new(0.0f64, 0.05).expect("noise distribution");
    let mut x = Array4::<f32>::zeros((NUM_CHANNELS, dims.t_in, h, w));
    let shifts: [(isize, isize); 3] = [(2, 0), (0, 2), (-2, 0)];
    let lags: [usize; 3] = [1, 2, 3];
    for c in 0..NUM_CHANNELS {
        for t in 0..dims.t_in {
            for y in 0..h {
                for xq in 0..w {
                    let l = latent[[t, y, xq]];
                    let base = match c {
                        0 => l,
                        1 => l * l,
                        2 => l.max(0.0).sqrt(),
                        3..=5 => {
                            let (dy, dx) = shifts[c - 3];
                            let ys = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let xs = (xq as isize + dx).clamp(0, w as isize - 1) as usize;
                            latent[[t, ys, xs]]
                        }
                        6..=8 => {
                            let lag = lags[c - 6];
                            latent[[t.saturating_sub(lag), y, xq]]
                        }
                        _ => noise.sample(&mut rng) * 20.0,
                    };
                    x[[c, t, y, xq]] = (base + noise.sample(&mut rng)) as f32;
                }
            }
        }
    }

    Ok((SpectralSequence::new(x)?, RainRateField::new(rates)?))
}

/// Binarizes rain rates with a closed `>=` comparison against the threshold.
pub fn binarize_rain(field: &RainRateField, threshold: f64) -> Result<RainMask> {
    if threshold <= 0.0 {
        return Err(CoreError::invalid(format!(
            "rain threshold must be positive, got {threshold}"
        )));
    }
    let t = threshold as f32;
    RainMask::new(field.rates.mapv(|r| u8::from(r >= t)))
}

/// One-hot encoding of a region id over `r` regions.
pub fn region_one_hot(region_id: u32, r: usize) -> Result<Array1<f32>> {
    if (region_id as usize) >= r {
        return Err(CoreError::invalid(format!(
            "region_id {region_id} out of range for {r} regions"
        )));
    }
    let mut v = Array1::<f32>::zeros(r);
    v[region_id as usize] = 1.0;
    Ok(v)
}

/// Generates a full dataset over `profiles × years × events`.
pub fn generate_dataset(
    seed: u64,
    profiles: &[RegionProfile],
    years: &[i32],
    events_per_pair: u32,
    dims: &GridDims,
    rain_threshold: f64,
) -> Result<Dataset> {
    if profiles.is_empty() || years.is_empty() || events_per_pair == 0 {
        return Err(CoreError::invalid(
            "dataset generation needs at least one region, year, and event",
        ));
    }
    if rain_threshold <= 0.0 {
        return Err(CoreError::invalid("rain_threshold must be positive"));
    }
    let mut samples = Vec::new();
    let mut keys = Vec::new();
    for profile in profiles {
        for &year in years {
            for sample_id in 0..events_per_pair {
                let event_seed = rng::mix(
                    seed,
                    &[u64::from(profile.region_id), year as u64, u64::from(sample_id)],
                );
                let (x, rates) = generate_event(event_seed, profile, dims)?;
                keys.push(SampleKey {
                    region_id: profile.region_id,
                    year,
                    sample_id,
                });
                samples.push(Sample {
                    region_id: profile.region_id,
                    year,
                    sample_id,
                    x,
                    rates,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        num_regions: profiles.len() as u32,
        years: years.to_vec(),
        dims: *dims,
        rain_threshold,
        regions: profiles.to_vec(),
        samples: keys,
    };
    manifest.validate()?;
    Ok(Dataset { manifest, samples })
}

/// Empirical rain fraction per region over a dataset. Regions with no
/// samples are absent from the map.
pub fn dataset_rain_fraction(
    dataset: &Dataset,
) -> Result<std::collections::BTreeMap<u32, f64>> {
    let mut rain: std::collections::BTreeMap<u32, (u64, u64)> = std::collections::BTreeMap::new();
    for sample in &dataset.samples {
        let mask = binarize_rain(&sample.rates, dataset.manifest.rain_threshold)?;
        let entry = rain.entry(sample.region_id).or_insert((0, 0));
        entry.0 += mask.mask.iter().map(|&m| u64::from(m)).sum::<u64>();
        entry.1 += mask.mask.len() as u64;
    }
    Ok(rain
        .into_iter()
        .map(|(region, (r, n))| (region, r as f64 / n as f64))
        .collect())
}
