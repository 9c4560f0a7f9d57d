//! Synthetic paired two-modality datasets with planted multi-label ground
//! truth.
//!
//! Each study draws a latent u ~ N(0, I); both modality vectors are fixed
//! random mixings of u plus noise, so paired samples share structure. Label
//! k is the equal-probability quantile bin of a fixed random projection of
//! u into c_k bins, which makes every label a function of the shared latent
//! and gives the labels real correlations.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifact::{quantize_f32, ArtifactReader, ArtifactWriter};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Tensor;

/// Split proportions follow the 413/203/395 study split of the source
/// dataset this generator stands in for.
pub const SPLIT_RATIOS: (f64, f64) = (413.0 / 1011.0, 203.0 / 1011.0);

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub latent_dim: usize,
    pub dim_derm: usize,
    pub dim_clinic: usize,
    pub class_counts: Vec<usize>,
    pub noise_std: f64,
    pub nonlinear: bool,
    pub seed: u64,
    /// Optional per-label class priors to emulate imbalance; inner vector
    /// length must equal that label's class count.
    #[serde(default)]
    pub class_priors: Option<Vec<Vec<f64>>>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_samples: 1011,
            latent_dim: 8,
            dim_derm: 32,
            dim_clinic: 24,
            class_counts: vec![3, 2, 3, 3, 3, 3, 3, 5],
            noise_std: 0.3,
            nonlinear: true,
            seed: 0,
            class_priors: None,
        }
    }
}

impl GeneratorConfig {
    pub fn label_count(&self) -> usize {
        self.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("generator.n_samples must be positive".into()));
        }
        for (f, v) in [
            ("latent_dim", self.latent_dim),
            ("dim_derm", self.dim_derm),
            ("dim_clinic", self.dim_clinic),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("generator.{f} must be positive")));
            }
        }
        if self.class_counts.is_empty() {
            return Err(Error::Config("generator.class_counts must be nonempty".into()));
        }
        for (k, &c) in self.class_counts.iter().enumerate() {
            if c < 2 {
                return Err(Error::Config(format!(
                    "generator.class_counts[{k}] must be >= 2, got {c}"
                )));
            }
        }
        if self.noise_std < 0.0 {
            return Err(Error::Config("generator.noise_std must be nonnegative".into()));
        }
        if let Some(priors) = &self.class_priors {
            if priors.len() != self.class_counts.len() {
                return Err(Error::Config(
                    "generator.class_priors must have one entry per label".into(),
                ));
            }
            for (k, p) in priors.iter().enumerate() {
                if p.len() != self.class_counts[k] || p.iter().any(|&x| x <= 0.0) {
                    return Err(Error::Config(format!(
                        "generator.class_priors[{k}] must hold {} positive weights",
                        self.class_counts[k]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One study: paired modality tensors plus ground-truth labels used only
/// for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPairSample {
    pub derm: Tensor,
    pub clinic: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<ModalityPairSample>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub config: GeneratorConfig,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[usize] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            other => panic!("unknown split {other:?}"),
        }
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, tag: &str) -> Vec<f64> {
    let mut rng = derived_rng(seed, tag, &[]);
    (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v / (rows as f64).sqrt()
        })
        .collect()
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let n = config.n_samples;
    let (du, dd, dc) = (config.latent_dim, config.dim_derm, config.dim_clinic);
    let m_derm = random_matrix(du, dd, config.seed, "mixing_derm");
    let m_clinic = random_matrix(du, dc, config.seed, "mixing_clinic");

    let mut latent_rng = derived_rng(config.seed, "latents", &[]);
    let mut noise_rng = derived_rng(config.seed, "noise", &[]);
    let mut latents = Vec::with_capacity(n);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let u: Vec<f64> = (0..du).map(|_| StandardNormal.sample(&mut latent_rng)).collect();
        let mut mix = |m: &[f64], dim: usize| -> Tensor {
            let mut x = vec![0.0; dim];
            for (p, up) in u.iter().enumerate() {
                for j in 0..dim {
                    x[j] += up * m[p * dim + j];
                }
            }
            for v in x.iter_mut() {
                if config.noise_std > 0.0 {
                    let e: f64 = StandardNormal.sample(&mut noise_rng);
                    *v += config.noise_std * e;
                }
                if config.nonlinear {
                    *v = v.tanh();
                }
            }
            let mut t = Tensor::vector(x);
            quantize_f32(&mut t);
            t
        };
        let derm = mix(&m_derm, dd);
        let clinic = mix(&m_clinic, dc);
        latents.push(u);
        samples.push(ModalityPairSample {
            derm,
            clinic,
            labels: Vec::new(),
        });
    }

    // labels: equal-probability (or prior-weighted) quantile bins of fixed
    // random projections of the latent
    for (k, &ck) in config.class_counts.iter().enumerate() {
        let w = {
            let mut rng = derived_rng(config.seed, "label_proj", &[k as u64]);
            let v: Vec<f64> = (0..du).map(|_| StandardNormal.sample(&mut rng)).collect();
            v
        };
        let scores: Vec<f64> = latents
            .iter()
            .map(|u| u.iter().zip(&w).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
        let weights: Vec<f64> = match &config.class_priors {
            Some(p) => p[k].clone(),
            None => vec![1.0; ck],
        };
        let wsum: f64 = weights.iter().sum();
        let mut cum = 0.0;
        let mut boundaries = Vec::with_capacity(ck);
        for wgt in &weights {
            cum += wgt / wsum;
            boundaries.push((cum * n as f64).round() as usize);
        }
        *boundaries.last_mut().unwrap() = n;
        for (rank, &i) in order.iter().enumerate() {
            let class = boundaries.iter().position(|&b| rank < b).unwrap();
            samples[i].labels.push(class);
        }
    }

    let n_train = (SPLIT_RATIOS.0 * n as f64).round() as usize;
    let n_val = (SPLIT_RATIOS.1 * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok(Dataset {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..n).collect(),
        samples,
        config: config.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetExtra {
    config: GeneratorConfig,
    labels: Vec<Vec<usize>>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

pub fn save(dataset: &Dataset, dir: &Path) -> Result<()> {
    let n = dataset.samples.len();
    let dd = dataset.config.dim_derm;
    let dc = dataset.config.dim_clinic;
    let mut derm = Vec::with_capacity(n * dd);
    let mut clinic = Vec::with_capacity(n * dc);
    for s in &dataset.samples {
        derm.extend_from_slice(s.derm.data());
        clinic.extend_from_slice(s.clinic.data());
    }
    let mut w = ArtifactWriter::new("dataset");
    w.add_tensor("derm", &Tensor::matrix(n, dd, derm)?);
    w.add_tensor("clinic", &Tensor::matrix(n, dc, clinic)?);
    let extra = DatasetExtra {
        config: dataset.config.clone(),
        labels: dataset.samples.iter().map(|s| s.labels.clone()).collect(),
        train: dataset.train.clone(),
        val: dataset.val.clone(),
        test: dataset.test.clone(),
    };
    w.write(dir, serde_json::to_value(extra)?)
}

pub fn load(dir: &Path) -> Result<Dataset> {
    let r = ArtifactReader::open(dir, "dataset")?;
    let extra: DatasetExtra = r.extra()?;
    let derm = r.tensor("derm")?;
    let clinic = r.tensor("clinic")?;
    let n = extra.config.n_samples;
    let structural = |reason: String| Error::Format {
        path: dir.join(crate::artifact::MANIFEST_FILE),
        reason,
    };
    if derm.rows() != n || clinic.rows() != n || extra.labels.len() != n {
        return Err(structural(format!(
            "manifest declares {n} samples but holds {} derm rows, {} clinic rows, {} label rows",
            derm.rows(),
            clinic.rows(),
            extra.labels.len()
        )));
    }
    let mut seen = vec![false; n];
    for &i in extra.train.iter().chain(&extra.val).chain(&extra.test) {
        if i >= n || seen[i] {
            return Err(structural("splits must be disjoint and in range".into()));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(structural("splits must cover all samples".into()));
    }
    let k = extra.config.label_count();
    let samples = (0..n)
        .map(|i| {
            if extra.labels[i].len() != k {
                return Err(structural(format!("sample {i} has wrong label count")));
            }
            Ok(ModalityPairSample {
                derm: Tensor::vector(derm.row(i).to_vec()),
                clinic: Tensor::vector(clinic.row(i).to_vec()),
                labels: extra.labels[i].clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        train: extra.train,
        val: extra.val,
        test: extra.test,
        config: extra.config,
    })
}
