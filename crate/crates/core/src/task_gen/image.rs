//! Image-completion tasks: pixels are points with coordinates in `[−1, 1]²`
//! and standardized intensities; in-context datasets come from other images
//! with the context image's label.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::idx::{ImageSet, PIXELS, SIDE};
use crate::rng::Rng;
use crate::task::{Dataset, Task};
use crate::{Error, Result, Tensor};

/// Inclusive ranges; the defaults are `N/100`, `N/5` and `N/2` of the 784
/// pixels, rounded down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageTaskConfig {
    pub n_c: [usize; 2],
    pub n_ic: [usize; 2],
    pub n_ic_points: [usize; 2],
}

impl Default for ImageTaskConfig {
    fn default() -> Self {
        Self {
            n_c: [PIXELS / 100, PIXELS / 5],
            n_ic: [0, 3],
            n_ic_points: [PIXELS / 100, PIXELS / 2],
        }
    }
}

impl ImageTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [usize; 2], lo: usize| r[0] <= r[1] && r[0] >= lo && r[1] <= PIXELS;
        if !ok(self.n_c, 0) || self.n_c[1] >= PIXELS {
            return Err(Error::Config(format!("n_c range {:?} must leave targets", self.n_c)));
        }
        if !ok(self.n_ic_points, 1) {
            return Err(Error::Config(format!("n_ic_points range {:?}", self.n_ic_points)));
        }
        if self.n_ic[0] > self.n_ic[1] {
            return Err(Error::Config(format!("n_ic range {:?} is empty", self.n_ic)));
        }
        Ok(())
    }
}

/// Mean and standard deviation of intensities scaled to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityStats {
    pub mean: f64,
    pub std: f64,
}

impl IntensityStats {
    pub fn of(set: &ImageSet) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Domain("intensity statistics of no images".into()));
        }
        let n = set.pixels.len() as f64;
        let mean = set.pixels.iter().map(|&p| p as f64 / 255.0).sum::<f64>() / n;
        let var = set
            .pixels
            .iter()
            .map(|&p| (p as f64 / 255.0 - mean).powi(2))
            .sum::<f64>()
            / n;
        if !(var > 0.0) {
            return Err(Error::Domain("images have constant intensity".into()));
        }
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn standardize(&self, p: u8) -> f64 {
        (p as f64 / 255.0 - self.mean) / self.std
    }
}

/// Affine map of pixel `(row, col)` onto `[−1, 1]²`.
pub fn pixel_coords(pixel: usize) -> [f64; 2] {
    let scale = |i: usize| -1.0 + 2.0 * i as f64 / (SIDE - 1) as f64;
    [scale(pixel / SIDE), scale(pixel % SIDE)]
}

/// Images grouped by label, with the statistics used to standardize them.
#[derive(Clone, Debug)]
pub struct ImagePool {
    pub set: ImageSet,
    pub stats: IntensityStats,
    by_label: Vec<Vec<usize>>,
}

impl ImagePool {
    /// `stats` should come from the training split.
    pub fn new(set: ImageSet, stats: IntensityStats) -> Result<Self> {
        let mut by_label = vec![Vec::new(); 10];
        for (i, &l) in set.labels.iter().enumerate() {
            by_label
                .get_mut(l as usize)
                .ok_or_else(|| Error::Format(format!("label {l} outside 0..=9")))?
                .push(i);
        }
        Ok(Self { set, stats, by_label })
    }

    pub fn with_label(&self, label: u8) -> &[usize] {
        &self.by_label[label as usize]
    }

    fn dataset(&self, image: usize, pixels: &[usize]) -> Result<Dataset> {
        let img = self.set.image(image);
        let x = pixels.iter().flat_map(|&p| pixel_coords(p)).collect();
        let y = pixels.iter().map(|&p| self.stats.standardize(img[p])).collect();
        Dataset::new(Tensor::matrix(pixels.len(), 2, x)?, Tensor::matrix(pixels.len(), 1, y)?)
    }
}

fn count(rng: &mut Rng, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Draws a label, a context image and `N_ic` further images of that label.
/// Context pixels are drawn without replacement and every other pixel of the
/// image is a target.
pub fn sample_image_task(cfg: &ImageTaskConfig, pool: &ImagePool, rng: &mut Rng) -> Result<Task> {
    let label = rng.random_range(0..10u8);
    let n_c = count(rng, cfg.n_c);
    let n_ic = count(rng, cfg.n_ic);
    let candidates = pool.with_label(label);
    if candidates.len() < n_ic + 1 {
        return Err(Error::InvalidTask(format!(
            "label {label} has {} images, {} needed",
            candidates.len(),
            n_ic + 1
        )));
    }
    let chosen: Vec<usize> = index::sample(rng, candidates.len(), n_ic + 1)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    let mut order: Vec<usize> = (0..PIXELS).collect();
    order.shuffle(rng);
    let context = pool.dataset(chosen[0], &order[..n_c])?;
    let target = pool.dataset(chosen[0], &order[n_c..])?;
    let in_context = chosen[1..]
        .iter()
        .map(|&img| {
            let n = count(rng, cfg.n_ic_points);
            let pixels = index::sample(rng, PIXELS, n).into_vec();
            pool.dataset(img, &pixels)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Task {
        context,
        in_context,
        target_x: target.x,
        target_y: Some(target.y),
    })
}
