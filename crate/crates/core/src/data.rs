//! Patient records, synthetic phantoms, z-score normalisation, augmentation
//! and patient-wise splitting.
//!
//! Label convention for phantoms: 0 background, 1 organ, `2..K` lesion
//! classes (nested rings, outermost first, when there are several).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// First lesion class of the phantom label convention.
pub const FIRST_LESION_CLASS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub modalities: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// C-S-H-W order.
    pub volume: Vec<f32>,
    /// S-H-W order.
    pub labels: Vec<u8>,
    pub disease: usize,
    pub spacing: f64,
}

impl PatientRecord {
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self, num_seg_classes: usize, num_diseases: usize) -> Result<()> {
        let plane = self.plane();
        if self.slices == 0 || self.modalities == 0 || plane == 0 {
            return Err(shape_err(
                "patient_record",
                format!("patient {} has an empty extent", self.id),
            ));
        }
        if self.volume.len() != self.modalities * self.slices * plane || self.labels.len() != self.slices * plane {
            return Err(shape_err(
                "patient_record",
                format!(
                    "patient {}: {} voxels / {} labels for {}x{}x{}x{}",
                    self.id,
                    self.volume.len(),
                    self.labels.len(),
                    self.modalities,
                    self.slices,
                    self.height,
                    self.width
                ),
            ));
        }
        if let Some(i) = self.volume.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "patient {} modality {} slice {}",
                self.id,
                i / (self.slices * plane),
                (i / plane) % self.slices
            )));
        }
        if let Some(i) = self.labels.iter().position(|&l| l as usize >= num_seg_classes) {
            return Err(Error::LabelOutOfRange {
                label: self.labels[i] as usize,
                num_classes: num_seg_classes,
                context: format!("patient {} slice {}", self.id, i / plane),
            });
        }
        if self.disease >= num_diseases {
            return Err(Error::LabelOutOfRange {
                label: self.disease,
                num_classes: num_diseases,
                context: format!("disease of patient {}", self.id),
            });
        }
        Ok(())
    }

    /// `[C, H, W]` input tensor of one slice.
    pub fn slice_input<T: Real>(&self, s: usize) -> Tensor<T> {
        let plane = self.plane();
        let mut data = Vec::with_capacity(self.modalities * plane);
        for c in 0..self.modalities {
            let off = (c * self.slices + s) * plane;
            data.extend(self.volume[off..off + plane].iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new([self.modalities, self.height, self.width], data).expect("record extent")
    }

    pub fn slice_labels(&self, s: usize) -> &[u8] {
        let plane = self.plane();
        &self.labels[s * plane..(s + 1) * plane]
    }

    pub fn modality(&self, c: usize) -> &[f32] {
        let n = self.slices * self.plane();
        &self.volume[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_seg_classes: usize,
    pub num_diseases: usize,
    pub class_names: Vec<String>,
    pub disease_names: Vec<String>,
    pub patients: Vec<PatientRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.patients.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if self.class_names.len() != self.num_seg_classes || self.disease_names.len() != self.num_diseases {
            return Err(Error::Config("class or disease names do not match their counts".into()));
        }
        let p0 = &self.patients[0];
        for p in &self.patients {
            p.validate(self.num_seg_classes, self.num_diseases)?;
            if (p.modalities, p.height, p.width) != (p0.modalities, p0.height, p0.width) {
                return Err(shape_err(
                    "dataset",
                    format!("patient {} extent differs from patient {}", p.id, p0.id),
                ));
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            patients: idx.iter().map(|&i| self.patients[i].clone()).collect(),
            ..self.header()
        }
    }

    fn header(&self) -> Dataset {
        Dataset {
            num_seg_classes: self.num_seg_classes,
            num_diseases: self.num_diseases,
            class_names: self.class_names.clone(),
            disease_names: self.disease_names.clone(),
            patients: Vec::new(),
        }
    }

    /// Copy with every patient z-scored per modality.
    pub fn normalized(&self) -> Dataset {
        let mut d = self.clone();
        for p in &mut d.patients {
            zscore_record(p);
        }
        d
    }

    pub fn label_volumes(&self) -> impl Iterator<Item = &[u8]> {
        self.patients.iter().map(|p| p.labels.as_slice())
    }

    pub fn diseases(&self) -> Vec<usize> {
        self.patients.iter().map(|p| p.disease).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub num_patients: usize,
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub num_modalities: usize,
    pub num_seg_classes: usize,
    pub num_diseases: usize,
    pub lesion_fraction_target: f64,
    /// Standard deviation of additive acquisition noise (organ intensity ~1).
    pub noise_sigma: f64,
    /// Scale of the lesion/organ intensity difference.
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            num_patients: 100,
            slices: 8,
            height: 32,
            width: 32,
            num_modalities: 2,
            num_seg_classes: 3,
            num_diseases: 2,
            lesion_fraction_target: 0.03,
            noise_sigma: 0.3,
            lesion_contrast: 1.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("num_patients", self.num_patients),
            ("slices", self.slices),
            ("height", self.height),
            ("width", self.width),
            ("num_modalities", self.num_modalities),
            ("num_diseases", self.num_diseases),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", n)));
            }
        }
        if self.num_seg_classes < 3 || self.num_seg_classes > 255 {
            return Err(Error::Config(format!(
                "num_seg_classes {} must be in [3, 255] (background, organ, lesion...)",
                self.num_seg_classes
            )));
        }
        if !(self.lesion_fraction_target > 0.0 && self.lesion_fraction_target <= 0.2) {
            return Err(Error::Config(format!(
                "lesion_fraction_target {} not in (0, 0.2]",
                self.lesion_fraction_target
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.lesion_contrast > 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0 and lesion_contrast > 0".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::from("background"), String::from("organ")];
        let lesions = self.num_seg_classes - FIRST_LESION_CLASS;
        for j in 0..lesions {
            names.push(if lesions == 1 {
                String::from("lesion")
            } else {
                format!("lesion{}", j)
            });
        }
        names
    }

    pub fn disease_names(&self) -> Vec<String> {
        (0..self.num_diseases).map(|d| format!("disease{}", d)).collect()
    }
}

/// Mean intensity of `class` in `modality` before gain, bias field and noise.
pub fn contrast_level(modality: usize, class: usize, lesion_contrast: f64) -> f64 {
    match class {
        0 => 0.0,
        1 => {
            if modality % 2 == 0 {
                1.0
            } else {
                0.8
            }
        }
        c => {
            let j = c - FIRST_LESION_CLASS;
            let sign = if (modality + j) % 2 == 0 { 1.0 } else { -1.0 };
            contrast_level(modality, 1, lesion_contrast) + sign * lesion_contrast * (0.6 + 0.3 * j as f64)
        }
    }
}

struct Blob {
    start: (f64, f64),
    end: (f64, f64),
    jitter: f64,
}

fn slice_profile(s: usize, n: usize) -> f64 {
    Float::sin(core::f64::consts::PI * (s as f64 + 0.5) / n as f64)
}

/// Phantom patients. Disease `d` carries `d + 1` lesion blobs whose size and
/// position evolve smoothly across slices inside an elliptical organ.
pub fn generate_phantoms(cfg: &PhantomConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (h, w, s_n) = (cfg.height as f64, cfg.width as f64, cfg.slices);
    let lesion_classes = cfg.num_seg_classes - FIRST_LESION_CLASS;
    let mean_blobs = (cfg.num_diseases as f64 + 1.0) / 2.0;
    let blob_area = cfg.lesion_fraction_target * h * w / mean_blobs;
    let r0 = Float::sqrt(blob_area / core::f64::consts::PI);
    // radius modulation across slices, normalised so the mean squared factor is 1
    let raw: Vec<f64> = (0..s_n).map(|s| 0.5 + slice_profile(s, s_n)).collect();
    let norm = Float::sqrt(raw.iter().map(|m| m * m).sum::<f64>() / s_n as f64);
    let modulation: Vec<f64> = raw.iter().map(|m| m / norm).collect();
    let m_max = modulation.iter().cloned().fold(0.0, f64::max);
    let r_max = r0 * m_max * 1.1;
    let organ_scale: Vec<f64> = (0..s_n).map(|s| 0.85 + 0.15 * slice_profile(s, s_n)).collect();
    let organ_min = organ_scale.iter().cloned().fold(f64::INFINITY, f64::min);
    let (ay_min, ax_min) = (0.30 * h * organ_min, 0.30 * w * organ_min);
    let lesion_area_max = cfg.num_diseases as f64 * core::f64::consts::PI * r_max * r_max;
    let organ_area_min = core::f64::consts::PI * ay_min * ax_min;
    if r_max >= ay_min.min(ax_min) || lesion_area_max > organ_area_min {
        return Err(Error::Config(format!(
            "lesions (radius up to {:.2}, {} blobs) do not fit inside the organ (semi-axes {:.2} x {:.2})",
            r_max, cfg.num_diseases, ay_min, ax_min
        )));
    }

    let plane = cfg.height * cfg.width;
    let mut patients = Vec::with_capacity(cfg.num_patients);
    for p in 0..cfg.num_patients {
        let mut rng = Rng::derive(cfg.seed, p as u64);
        let disease = rng.below(cfg.num_diseases);
        let cy = h / 2.0 + rng.range(-0.05, 0.05) * h;
        let cx = w / 2.0 + rng.range(-0.05, 0.05) * w;
        let ay = rng.range(0.30, 0.36) * h;
        let ax = rng.range(0.30, 0.36) * w;
        let phi = rng.range(-0.5, 0.5);
        let (sp, cp) = (Float::sin(phi), Float::cos(phi));
        // blob centres live in the organ shrunk by the largest blob radius
        let (iy, ix) = (ay * organ_min - r_max, ax * organ_min - r_max);
        let inside = |rng: &mut Rng| loop {
            let (u, v) = (rng.range(-1.0, 1.0), rng.range(-1.0, 1.0));
            if u * u + v * v <= 1.0 {
                let (dy, dx) = (u * iy, v * ix);
                return (cy + cp * dy - sp * dx, cx + sp * dy + cp * dx);
            }
        };
        let mut blobs: Vec<Blob> = Vec::new();
        for _ in 0..=disease {
            let mut best = None;
            for _ in 0..100 {
                let start = inside(&mut rng);
                let end = inside(&mut rng);
                let drift = Float::hypot(end.0 - start.0, end.1 - start.1);
                let end = if drift > 0.15 * h {
                    let t = 0.15 * h / drift;
                    (start.0 + t * (end.0 - start.0), start.1 + t * (end.1 - start.1))
                } else {
                    end
                };
                let clear = blobs.iter().all(|b| {
                    Float::hypot(b.start.0 - start.0, b.start.1 - start.1) > 2.0 * r_max
                        && Float::hypot(b.end.0 - end.0, b.end.1 - end.1) > 2.0 * r_max
                });
                best = Some((start, end));
                if clear {
                    break;
                }
            }
            let (start, end) = best.expect("at least one attempt");
            blobs.push(Blob {
                start,
                end,
                jitter: rng.range(0.9, 1.1),
            });
        }
        let gains: Vec<f64> = (0..cfg.num_modalities).map(|_| rng.range(0.9, 1.1)).collect();
        let fields: Vec<(f64, f64)> = (0..cfg.num_modalities)
            .map(|_| (rng.range(-0.2, 0.2), rng.range(-0.2, 0.2)))
            .collect();

        let mut labels = vec![0u8; s_n * plane];
        for s in 0..s_n {
            let t = if s_n > 1 { s as f64 / (s_n - 1) as f64 } else { 0.5 };
            let (oy, ox) = (ay * organ_scale[s], ax * organ_scale[s]);
            for i in 0..cfg.height {
                for j in 0..cfg.width {
                    let (py, px) = (i as f64 + 0.5, j as f64 + 0.5);
                    let (dy, dx) = (py - cy, px - cx);
                    let (ry, rx) = (cp * dy + sp * dx, -sp * dy + cp * dx);
                    let mut class = 0usize;
                    if (ry / oy).powi(2) + (rx / ox).powi(2) <= 1.0 {
                        class = 1;
                    }
                    for b in &blobs {
                        let r = r0 * modulation[s] * b.jitter;
                        let by = b.start.0 + t * (b.end.0 - b.start.0);
                        let bx = b.start.1 + t * (b.end.1 - b.start.1);
                        let rho = Float::hypot(py - by, px - bx) / r;
                        if rho <= 1.0 {
                            let ring = ((1.0 - rho) * lesion_classes as f64) as usize;
                            class = class.max(FIRST_LESION_CLASS + ring.min(lesion_classes - 1));
                        }
                    }
                    labels[s * plane + i * cfg.width + j] = class as u8;
                }
            }
        }
        let mut volume = vec![0f32; cfg.num_modalities * s_n * plane];
        for c in 0..cfg.num_modalities {
            let levels: Vec<f64> = (0..cfg.num_seg_classes)
                .map(|k| contrast_level(c, k, cfg.lesion_contrast))
                .collect();
            for s in 0..s_n {
                for i in 0..cfg.height {
                    for j in 0..cfg.width {
                        let q = s * plane + i * cfg.width + j;
                        let bias = fields[c].0 * (i as f64 / h - 0.5) + fields[c].1 * (j as f64 / w - 0.5);
                        let v = levels[labels[q] as usize] * gains[c] + bias + cfg.noise_sigma * rng.normal();
                        volume[c * s_n * plane + q] = v as f32;
                    }
                }
            }
        }
        patients.push(PatientRecord {
            id: format!("P{:04}", p),
            modalities: cfg.num_modalities,
            slices: s_n,
            height: cfg.height,
            width: cfg.width,
            volume,
            labels,
            disease,
            spacing: 1.0,
        });
    }
    Ok(Dataset {
        num_seg_classes: cfg.num_seg_classes,
        num_diseases: cfg.num_diseases,
        class_names: cfg.class_names(),
        disease_names: cfg.disease_names(),
        patients,
    })
}

/// Fraction of pixels carrying a lesion class.
pub fn lesion_fraction(d: &Dataset) -> f64 {
    let (mut lesion, mut total) = (0usize, 0usize);
    for p in &d.patients {
        lesion += p.labels.iter().filter(|&&l| l as usize >= FIRST_LESION_CLASS).count();
        total += p.labels.len();
    }
    lesion as f64 / total.max(1) as f64
}

/// Evaluation regions for the phantom label convention: every foreground
/// class, the union of lesion classes when there are several, and the whole
/// organ including lesions.
pub fn phantom_regions(class_names: &[String]) -> Vec<crate::metrics::RegionSpec> {
    use crate::metrics::{class_regions, RegionSpec};
    let k = class_names.len();
    let mut composites = Vec::new();
    if k > FIRST_LESION_CLASS + 1 {
        composites.push(RegionSpec::new(
            "lesion_all",
            &(FIRST_LESION_CLASS..k).collect::<Vec<_>>(),
        ));
    }
    composites.push(RegionSpec::new("whole", &(1..k).collect::<Vec<_>>()));
    class_regions(class_names, &composites)
}

pub const ZSCORE_SIGMA_FLOOR: f64 = 1e-8;

/// In-place `(x - mean) / max(std, floor)` with the population deviation.
pub fn zscore_normalize<T: Real>(x: &mut [T]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = x.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
    let std = Float::sqrt(var).max(ZSCORE_SIGMA_FLOOR);
    for v in x.iter_mut() {
        *v = T::of((v.as_f64() - mean) / std);
    }
}

/// Z-scores every modality of a record over all its slices.
pub fn zscore_record(p: &mut PatientRecord) {
    let n = p.slices * p.plane();
    for c in 0..p.modalities {
        zscore_normalize(&mut p.volume[c * n..(c + 1) * n]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Side fraction of the crop window, resized back to full extent.
    pub crop_fraction: [f64; 2],
    pub scale: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub noise_sigma: f64,
    pub p_crop: f64,
    pub p_scale: f64,
    pub p_rotate: f64,
    pub p_noise: f64,
    /// Augment at evaluation time too (off: aggregation of augmented
    /// predictions is not defined).
    pub test_time: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            crop_fraction: [0.85, 1.0],
            scale: [0.9, 1.1],
            rotation_deg: [-10.0, 10.0],
            noise_sigma: 0.05,
            p_crop: 0.5,
            p_scale: 0.5,
            p_rotate: 0.5,
            p_noise: 0.5,
            test_time: false,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            crop_fraction: [1.0, 1.0],
            scale: [1.0, 1.0],
            rotation_deg: [0.0, 0.0],
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !ordered(self.crop_fraction) || self.crop_fraction[0] <= 0.0 || self.crop_fraction[1] > 1.0 {
            return Err(Error::Config(format!(
                "crop_fraction {:?} must lie in (0, 1]",
                self.crop_fraction
            )));
        }
        if !ordered(self.scale) || self.scale[0] <= 0.0 {
            return Err(Error::Config(format!(
                "scale {:?} must be positive and ordered",
                self.scale
            )));
        }
        if !ordered(self.rotation_deg) || self.rotation_deg[0] < -10.0 || self.rotation_deg[1] > 10.0 {
            return Err(Error::Config(format!(
                "rotation_deg {:?} must lie in [-10, 10]",
                self.rotation_deg
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        for p in [self.p_crop, self.p_scale, self.p_rotate, self.p_noise] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {} not in [0, 1]", p)));
            }
        }
        Ok(())
    }
}

/// Output-to-source pixel map shared by every slice and modality of a record.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine2 {
    // src = a * (dst - centre) + offset
    a: [[f64; 2]; 2],
    offset: [f64; 2],
}

impl Affine2 {
    fn is_identity(&self, h: usize, w: usize) -> bool {
        self.a == [[1.0, 0.0], [0.0, 1.0]] && self.offset == [h as f64 / 2.0, w as f64 / 2.0]
    }

    fn map(&self, y: f64, x: f64, cy: f64, cx: f64) -> (f64, f64) {
        let (dy, dx) = (y - cy, x - cx);
        (
            self.a[0][0] * dy + self.a[0][1] * dx + self.offset[0],
            self.a[1][0] * dy + self.a[1][1] * dx + self.offset[1],
        )
    }
}

fn sample_transform(cfg: &AugmentationConfig, h: usize, w: usize, rng: &mut Rng) -> Affine2 {
    let (hf, wf) = (h as f64, w as f64);
    let mut crop = 1.0;
    let mut centre = [hf / 2.0, wf / 2.0];
    if rng.bernoulli(cfg.p_crop) {
        crop = rng.range(cfg.crop_fraction[0], cfg.crop_fraction[1]);
        let (ch, cw) = (crop * hf, crop * wf);
        centre = [rng.range(0.0, hf - ch) + ch / 2.0, rng.range(0.0, wf - cw) + cw / 2.0];
    }
    let scale = if rng.bernoulli(cfg.p_scale) {
        rng.range(cfg.scale[0], cfg.scale[1])
    } else {
        1.0
    };
    let theta = if rng.bernoulli(cfg.p_rotate) {
        rng.range(cfg.rotation_deg[0], cfg.rotation_deg[1]).to_radians()
    } else {
        0.0
    };
    let (s, c) = (Float::sin(theta), Float::cos(theta));
    // inverse rotation, then inverse zoom, then into the crop window
    let k = crop / scale;
    Affine2 {
        a: [[k * c, k * s], [-k * s, k * c]],
        offset: centre,
    }
}

fn clamp_index(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

fn bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y, x) = (y - 0.5, x - 0.5);
    let (y0, x0) = (Float::floor(y), Float::floor(x));
    let (ty, tx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let at = |i: isize, j: isize| src[clamp_index(i, h) * w + clamp_index(j, w)] as f64;
    let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
    let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
    (top * (1.0 - ty) + bot * ty) as f32
}

fn nearest(src: &[u8], h: usize, w: usize, y: f64, x: f64) -> u8 {
    let i = clamp_index(Float::floor(y) as isize, h);
    let j = clamp_index(Float::floor(x) as isize, w);
    src[i * w + j]
}

/// One random crop/zoom/rotation shared by all slices and modalities of the
/// record (bilinear intensities, nearest labels, clamp at the border), then
/// optional Gaussian noise on intensities.
pub fn augment(record: &PatientRecord, cfg: &AugmentationConfig, rng: &mut Rng) -> PatientRecord {
    let (h, w) = (record.height, record.width);
    let plane = record.plane();
    let tf = sample_transform(cfg, h, w, rng);
    let mut out = record.clone();
    if !tf.is_identity(h, w) {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        let coords: Vec<(f64, f64)> = (0..plane)
            .map(|q| tf.map((q / w) as f64 + 0.5, (q % w) as f64 + 0.5, cy, cx))
            .collect();
        for chunk in 0..record.modalities * record.slices {
            let src = &record.volume[chunk * plane..(chunk + 1) * plane];
            let dst = &mut out.volume[chunk * plane..(chunk + 1) * plane];
            for (d, &(y, x)) in dst.iter_mut().zip(&coords) {
                *d = bilinear(src, h, w, y, x);
            }
        }
        for s in 0..record.slices {
            let src = &record.labels[s * plane..(s + 1) * plane];
            let dst = &mut out.labels[s * plane..(s + 1) * plane];
            for (d, &(y, x)) in dst.iter_mut().zip(&coords) {
                *d = nearest(src, h, w, y, x);
            }
        }
    }
    if cfg.noise_sigma > 0.0 && rng.bernoulli(cfg.p_noise) {
        for v in &mut out.volume {
            *v += (cfg.noise_sigma * rng.normal()) as f32;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffled split of patient indices; a patient's slices never straddle
/// both sides.
pub fn patient_split(num_patients: usize, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction {} not in [0, 1)", val_fraction)));
    }
    let mut idx: Vec<usize> = (0..num_patients).collect();
    Rng::derive(seed, 0x5911).shuffle(&mut idx);
    let n_val = Float::round(num_patients as f64 * val_fraction) as usize;
    let n_val = if val_fraction > 0.0 { n_val.max(1) } else { 0 };
    if n_val >= num_patients {
        return Err(Error::Config(format!(
            "{} patients cannot be split with val_fraction {}",
            num_patients, val_fraction
        )));
    }
    let val = idx.split_off(num_patients - n_val);
    Ok(Split { train: idx, val })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn small(n: usize) -> PhantomConfig {
        PhantomConfig {
            num_patients: n,
            ..PhantomConfig::default()
        }
    }

    #[test]
    fn phantoms_are_deterministic_and_valid() {
        let a = generate_phantoms(&small(5)).unwrap();
        let b = generate_phantoms(&small(5)).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        let c = generate_phantoms(&PhantomConfig { seed: 1, ..small(5) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lesion_fraction_regression_bound() {
        let d = generate_phantoms(&small(100)).unwrap();
        let f = lesion_fraction(&d);
        assert!((0.0075..=0.06).contains(&f), "{}", f);
    }

    #[test]
    fn diseases_roughly_balanced_and_encoded_by_blob_count() {
        let d = generate_phantoms(&small(100)).unwrap();
        let ones = d.patients.iter().filter(|p| p.disease == 1).count();
        assert!((40..=60).contains(&ones), "{}", ones);
        let area = |dis: usize| {
            let ps: Vec<_> = d.patients.iter().filter(|p| p.disease == dis).collect();
            ps.iter()
                .map(|p| p.labels.iter().filter(|&&l| l >= 2).count())
                .sum::<usize>() as f64
                / ps.len() as f64
        };
        assert!(area(1) > 1.5 * area(0));
    }

    #[test]
    fn nested_lesion_classes() {
        let cfg = PhantomConfig {
            num_seg_classes: 4,
            lesion_fraction_target: 0.08,
            ..small(6)
        };
        let d = generate_phantoms(&cfg).unwrap();
        d.validate().unwrap();
        let count = |k: u8| {
            d.patients
                .iter()
                .flat_map(|p| p.labels.iter())
                .filter(|&&l| l == k)
                .count()
        };
        assert!(count(2) > 0 && count(3) > 0);
        assert_eq!(d.class_names, ["background", "organ", "lesion0", "lesion1"]);
    }

    #[test]
    fn oversized_lesions_are_rejected() {
        let cfg = PhantomConfig {
            num_diseases: 6,
            lesion_fraction_target: 0.2,
            ..small(2)
        };
        assert!(matches!(generate_phantoms(&cfg), Err(Error::Config(_))));
        let cfg = PhantomConfig {
            lesion_fraction_target: 0.5,
            ..small(2)
        };
        assert!(generate_phantoms(&cfg).is_err());
    }

    #[test]
    fn zscore_hand_values() {
        let mut x = [1.0f64, 2.0, 3.0];
        zscore_normalize(&mut x);
        assert!((x[0] + 1.22474).abs() < 1e-5);
        assert!(x[1].abs() < 1e-12);
        assert!((x[2] - 1.22474).abs() < 1e-5);
        let mut c = [4.0f32; 7];
        zscore_normalize(&mut c);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_augmentation() {
        let d = generate_phantoms(&small(2)).unwrap();
        let mut rng = Rng::seed(3);
        let cfg = AugmentationConfig {
            p_noise: 0.0,
            ..AugmentationConfig::identity()
        };
        for p in &d.patients {
            assert_eq!(&augment(p, &cfg, &mut rng), p);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_label_closed() {
        let cfg = PhantomConfig {
            num_seg_classes: 4,
            lesion_fraction_target: 0.08,
            ..small(3)
        };
        let d = generate_phantoms(&cfg).unwrap();
        let aug = AugmentationConfig {
            p_crop: 1.0,
            p_scale: 1.0,
            p_rotate: 1.0,
            p_noise: 1.0,
            ..AugmentationConfig::default()
        };
        for p in &d.patients {
            let a = augment(p, &aug, &mut Rng::seed(11));
            let b = augment(p, &aug, &mut Rng::seed(11));
            assert_eq!(a, b);
            assert_ne!(&a, p);
            assert!(a.labels.iter().all(|&l| l < 4));
            assert_eq!(a.id, p.id);
            assert_eq!(a.labels.len(), p.labels.len());
        }
    }

    #[test]
    fn augmentation_rejects_wide_rotation() {
        let cfg = AugmentationConfig {
            rotation_deg: [-15.0, 10.0],
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
        AugmentationConfig::default().validate().unwrap();
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let s = patient_split(50, 0.2, 4).unwrap();
        assert_eq!(s.val.len(), 10);
        let mut all: Vec<_> = s.train.iter().chain(&s.val).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert!(patient_split(1, 0.5, 0).is_err());
    }

    #[test]
    fn bad_label_names_patient_and_slice() {
        let mut d = generate_phantoms(&small(2)).unwrap();
        let plane = 32 * 32;
        d.patients[1].labels[3 * plane + 5] = 9;
        match d.validate() {
            Err(Error::LabelOutOfRange { label: 9, context, .. }) => {
                assert!(context.contains("P0001") && context.contains("slice 3"), "{}", context)
            }
            other => panic!("{:?}", other),
        }
    }

    proptest! {
        #[test]
        fn zscore_moments_and_idempotence(xs in proptest::collection::vec(-1e3f64..1e3, 2..200)) {
            let mut x = xs.clone();
            zscore_normalize(&mut x);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() < 1e-6);
            let spread = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xs.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-6 {
                prop_assert!((std - 1.0).abs() < 1e-6);
            }
            let mut y = x.clone();
            zscore_normalize(&mut y);
            for (a, b) in x.iter().zip(&y) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn augmentation_never_invents_labels(seed in 0u64..1000) {
            let d = generate_phantoms(&small(1)).unwrap();
            let p = &d.patients[0];
            let a = augment(p, &AugmentationConfig::default(), &mut Rng::seed(seed));
            let mut present = [false; 3];
            for &l in &p.labels { present[l as usize] = true; }
            prop_assert!(a.labels.iter().all(|&l| present[l as usize]));
        }
    }
}
