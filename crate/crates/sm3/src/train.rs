//! Two-stage pretraining: multi-modality contrastive SSL (stage 1) under
//! the four fusion strategies, then pseudo-multi-label SSL (stage 2) under
//! the five classifier strategies, plus the AdamW optimizer and the
//! checkpoint format.

use std::collections::BTreeMap;
use std::path::Path;

use crate::artifact::{ArtifactReader, ArtifactWriter};
use crate::augment::{augment, view_rng};
use crate::config::{MlStrategy, MmStrategy, RunConfig};
use crate::error::{Error, Result};
use crate::losses;
use crate::models::{Mlp, RelationModule};
use crate::params::{ParamSet, ParamVars};
use crate::pseudolabel::{generate_pseudo_multilabels, PseudoLabelSet};
use crate::rng::{derived_rng, Rng};
use crate::synthdata::Dataset;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// AdamW: adaptive moments with bias correction and decoupled weight decay
/// (decay applied directly to parameters, not through the gradient).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            weight_decay,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every parameter matched by `trainable`. Non-finite
    /// gradients abort the step.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &BTreeMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        for (name, g) in grads {
            if trainable(name) && !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p_i = &mut p.data_mut()[i];
                *p_i -= self.learning_rate * self.weight_decay * *p_i;
                *p_i -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// All model components for a given strategy pair, described as prefixes
/// into one shared [`ParamSet`].
pub struct Sm3Model {
    pub mm_strategy: MmStrategy,
    pub ml_strategy: MlStrategy,
    pub class_counts: Vec<usize>,
    pub encoder_derm: Mlp,
    pub encoder_clinic: Mlp,
    pub proj_derm: Option<Mlp>,
    pub proj_clinic: Option<Mlp>,
    pub mm_proj_derm: Option<Mlp>,
    pub mm_proj_clinic: Option<Mlp>,
    pub cat_proj: Option<Mlp>,
    pub label_projs: Vec<Mlp>,
    pub relation: RelationModule,
    pub class_heads: Vec<Mlp>,
    pub relation_dropout: f64,
}

impl Sm3Model {
    pub fn from_run(run: &RunConfig) -> Self {
        let m = &run.model;
        let g = &run.generator;
        let act = m.activation;
        let f = m.feature_dim;
        let z = m.proj_dim;
        let l = m.label_dim;
        let k = g.label_count();
        let enc_widths = |input: usize| {
            let mut w = vec![input];
            w.extend(&m.encoder_hidden);
            w.push(f);
            w
        };
        // dual branches: identical architecture, disjoint parameter storage
        let encoder_derm = Mlp::new("encoder_derm", enc_widths(g.dim_derm), act);
        let encoder_clinic = Mlp::new("encoder_clinic", enc_widths(g.dim_clinic), act);
        let two_layer = |prefix: &str, input: usize| Mlp::new(prefix, vec![input, input, z], act);

        let (proj_derm, proj_clinic, mm_proj_derm, mm_proj_clinic, cat_proj) =
            match run.train.mm_strategy {
                MmStrategy::Simclr => (
                    Some(two_layer("proj_derm", f)),
                    Some(two_layer("proj_clinic", f)),
                    None,
                    None,
                    None,
                ),
                MmStrategy::Concat => (None, None, None, None, Some(two_layer("cat_proj", 2 * f))),
                MmStrategy::SepShared => (
                    Some(two_layer("proj_derm", f)),
                    Some(two_layer("proj_clinic", f)),
                    Some(two_layer("mm_proj_shared", f)),
                    Some(two_layer("mm_proj_shared", f)),
                    None,
                ),
                MmStrategy::SepSep => (
                    Some(two_layer("proj_derm", f)),
                    Some(two_layer("proj_clinic", f)),
                    Some(two_layer("mm_proj_derm", f)),
                    Some(two_layer("mm_proj_clinic", f)),
                    None,
                ),
            };

        let label_projs: Vec<Mlp> = (0..k)
            .map(|i| Mlp::new(format!("label_proj{i}"), vec![2 * f, l], act).with_act_after_last())
            .collect();
        let relation = match run.train.ml_strategy {
            MlStrategy::NoProj | MlStrategy::Proj => RelationModule::none(),
            MlStrategy::Msa => RelationModule::msa("relation", l, m.relation_dropout),
            MlStrategy::Tel => {
                RelationModule::encoder_stack("relation", 1, l, m.relation_ffn_dim, m.relation_dropout)
            }
            MlStrategy::Te => {
                RelationModule::encoder_stack("relation", 2, l, m.relation_ffn_dim, m.relation_dropout)
            }
        };
        let head_input = if run.train.ml_strategy == MlStrategy::NoProj { 2 * f } else { l };
        let class_heads = g
            .class_counts
            .iter()
            .enumerate()
            .map(|(i, &c)| Mlp::linear(format!("class_head{i}"), head_input, c))
            .collect();
        Self {
            mm_strategy: run.train.mm_strategy,
            ml_strategy: run.train.ml_strategy,
            class_counts: g.class_counts.clone(),
            encoder_derm,
            encoder_clinic,
            proj_derm,
            proj_clinic,
            mm_proj_derm,
            mm_proj_clinic,
            cat_proj,
            label_projs,
            relation,
            class_heads,
            relation_dropout: m.relation_dropout,
        }
    }

    pub fn init_stage1(&self, params: &mut ParamSet, seed: u64) {
        self.encoder_derm.init(params, seed);
        self.encoder_clinic.init(params, seed);
        for head in [&self.proj_derm, &self.proj_clinic, &self.mm_proj_derm, &self.mm_proj_clinic, &self.cat_proj]
            .into_iter()
            .flatten()
        {
            head.init(params, seed);
        }
    }

    pub fn init_stage2(&self, params: &mut ParamSet, seed: u64) {
        if self.ml_strategy != MlStrategy::NoProj {
            for p in &self.label_projs {
                p.init(params, seed);
            }
        }
        self.relation.init(params, seed);
        for h in &self.class_heads {
            h.init(params, seed);
        }
    }

    /// Names of parameters the stage-2 classifier stack owns.
    pub fn stage2_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.ml_strategy != MlStrategy::NoProj {
            for p in &self.label_projs {
                names.extend(p.param_names());
            }
        }
        names.extend(self.relation.param_names());
        for h in &self.class_heads {
            names.extend(h.param_names());
        }
        names
    }

    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("encoder_derm") || name.starts_with("encoder_clinic")
    }

    /// Concatenated two-branch features for un-augmented samples.
    pub fn features(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        derm: ValueId,
        clinic: ValueId,
    ) -> ValueId {
        let hd = self.encoder_derm.forward(tape, vars, derm);
        let hc = self.encoder_clinic.forward(tape, vars, clinic);
        tape.concat_cols(hd, hc)
    }

    /// Per-head logits for a batch of concatenated features (n × 2F).
    ///
    /// Relation strategies run the attention module per sample over its K
    /// label tokens; `train_rng` enables dropout.
    pub fn classifier_logits(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        h_cat: ValueId,
        mut train_rng: Option<&mut Rng>,
    ) -> Vec<ValueId> {
        let k = self.class_counts.len();
        match self.ml_strategy {
            MlStrategy::NoProj => self
                .class_heads
                .iter()
                .map(|h| h.forward(tape, vars, h_cat))
                .collect(),
            MlStrategy::Proj => (0..k)
                .map(|i| {
                    let p = self.label_projs[i].forward(tape, vars, h_cat);
                    self.class_heads[i].forward(tape, vars, p)
                })
                .collect(),
            _ => {
                let n = tape.value(h_cat).rows();
                let projected: Vec<ValueId> = self
                    .label_projs
                    .iter()
                    .map(|p| p.forward(tape, vars, h_cat))
                    .collect();
                let mut per_head_rows: Vec<Vec<ValueId>> = vec![Vec::with_capacity(n); k];
                for i in 0..n {
                    let token_rows: Vec<ValueId> = projected
                        .iter()
                        .map(|&p| tape.slice_rows(p, i, 1))
                        .collect();
                    let tokens = tape.concat_rows(&token_rows);
                    let refined =
                        self.relation
                            .forward(tape, vars, tokens, train_rng.as_deref_mut());
                    for (head, rows) in per_head_rows.iter_mut().enumerate() {
                        let tok = tape.slice_rows(refined, head, 1);
                        rows.push(self.class_heads[head].forward(tape, vars, tok));
                    }
                }
                per_head_rows
                    .into_iter()
                    .map(|rows| tape.concat_rows(&rows))
                    .collect()
            }
        }
    }

    /// Per-label embedding matrices used for clustering (n × d each).
    pub fn label_embeddings(
        &self,
        params: &ParamSet,
        h_cat: &Tensor,
        pre_relation: bool,
    ) -> Vec<Tensor> {
        let k = self.class_counts.len();
        let mut tape = Tape::new();
        let vars = ParamVars::bind_trainable(&mut tape, params, |_| false);
        let h = tape.constant(h_cat.clone());
        match self.ml_strategy {
            MlStrategy::NoProj => vec![h_cat.clone(); k],
            MlStrategy::Proj => self
                .label_projs
                .iter()
                .map(|p| {
                    let out = p.forward(&mut tape, &vars, h);
                    tape.value(out).clone()
                })
                .collect(),
            _ => {
                let projected: Vec<ValueId> = self
                    .label_projs
                    .iter()
                    .map(|p| p.forward(&mut tape, &vars, h))
                    .collect();
                if pre_relation {
                    return projected.iter().map(|&p| tape.value(p).clone()).collect();
                }
                let n = h_cat.rows();
                let dim = tape.value(projected[0]).cols();
                let mut out = vec![Vec::with_capacity(n * dim); k];
                for i in 0..n {
                    let token_rows: Vec<ValueId> = projected
                        .iter()
                        .map(|&p| tape.slice_rows(p, i, 1))
                        .collect();
                    let tokens = tape.concat_rows(&token_rows);
                    let refined = self.relation.forward(&mut tape, &vars, tokens, None);
                    let rt = tape.value(refined);
                    for (head, col) in out.iter_mut().enumerate() {
                        col.extend_from_slice(rt.row(head));
                    }
                }
                out.into_iter()
                    .map(|data| Tensor::matrix(n, dim, data).unwrap())
                    .collect()
            }
        }
    }
}

/// Versioned snapshot of all parameters plus the configuration that
/// produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub stage: String,
    pub epoch: usize,
    pub loss_columns: Vec<String>,
    pub loss_history: Vec<Vec<f64>>,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
struct CheckpointExtra {
    run: RunConfig,
    stage: String,
    epoch: usize,
    loss_columns: Vec<String>,
    loss_history: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut w = ArtifactWriter::new("checkpoint");
        for (name, t) in self.params.iter() {
            w.add_tensor(format!("param/{name}"), t);
        }
        let extra = CheckpointExtra {
            run: self.run.clone(),
            stage: self.stage.clone(),
            epoch: self.epoch,
            loss_columns: self.loss_columns.clone(),
            loss_history: self.loss_history.clone(),
        };
        w.write(dir, serde_json::to_value(extra)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let r = ArtifactReader::open(dir, "checkpoint")?;
        let extra: CheckpointExtra = r.extra()?;
        let mut params = ParamSet::new();
        for entry in &r.manifest.tensors {
            if let Some(name) = entry.name.strip_prefix("param/") {
                params.insert(name, r.tensor(&entry.name)?);
            }
        }
        Ok(Self {
            run: extra.run,
            stage: extra.stage,
            epoch: extra.epoch,
            loss_columns: extra.loss_columns,
            loss_history: extra.loss_history,
            params,
        })
    }

    /// Loss history as CSV (epoch, <columns...>).
    pub fn loss_history_csv(&self) -> String {
        let mut out = String::from("epoch");
        for c in &self.loss_columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (epoch, row) in self.loss_history.iter().enumerate() {
            out.push_str(&(epoch + 1).to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn batch_matrix(dataset: &Dataset, indices: &[usize], modality: fn(&crate::synthdata::ModalityPairSample) -> &Tensor) -> Tensor {
    let dim = modality(&dataset.samples[indices[0]]).len();
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &i in indices {
        data.extend_from_slice(modality(&dataset.samples[i]).data());
    }
    Tensor::matrix(indices.len(), dim, data).unwrap()
}

fn augmented_views(
    dataset: &Dataset,
    indices: &[usize],
    run: &RunConfig,
    epoch: usize,
) -> [Tensor; 4] {
    let policy = &run.augment;
    let seed = run.train.seed;
    let mut views: Vec<Vec<f64>> = vec![Vec::new(); 4];
    for &i in indices {
        let s = &dataset.samples[i];
        for (v, (tensor, view_idx)) in [(&s.derm, 0u64), (&s.derm, 1), (&s.clinic, 2), (&s.clinic, 3)]
            .into_iter()
            .enumerate()
        {
            let mut rng = view_rng(seed, i, view_idx as usize, epoch);
            let aug = augment(tensor, policy, &mut rng);
            views[v].extend_from_slice(aug.data());
        }
    }
    let n = indices.len();
    let dd = dataset.config.dim_derm;
    let dc = dataset.config.dim_clinic;
    [
        Tensor::matrix(n, dd, std::mem::take(&mut views[0])).unwrap(),
        Tensor::matrix(n, dd, std::mem::take(&mut views[1])).unwrap(),
        Tensor::matrix(n, dc, std::mem::take(&mut views[2])).unwrap(),
        Tensor::matrix(n, dc, std::mem::take(&mut views[3])).unwrap(),
    ]
}

/// Stage-1 loss terms for one batch: (l_derm, l_clinic, l_mm, total).
fn stage1_loss(
    model: &Sm3Model,
    tape: &mut Tape,
    vars: &ParamVars,
    views: &[Tensor; 4],
    run: &RunConfig,
) -> Result<(f64, f64, f64, ValueId)> {
    let tau = run.train.tau;
    let xd1 = tape.constant(views[0].clone());
    let xd2 = tape.constant(views[1].clone());
    let xc1 = tape.constant(views[2].clone());
    let xc2 = tape.constant(views[3].clone());
    let hd1 = model.encoder_derm.forward(tape, vars, xd1);
    let hd2 = model.encoder_derm.forward(tape, vars, xd2);
    let hc1 = model.encoder_clinic.forward(tape, vars, xc1);
    let hc2 = model.encoder_clinic.forward(tape, vars, xc2);
    match model.mm_strategy {
        MmStrategy::Concat => {
            let cat1 = tape.concat_cols(hd1, hc1);
            let cat2 = tape.concat_cols(hd2, hc2);
            let proj = model.cat_proj.as_ref().unwrap();
            let z1 = proj.forward(tape, vars, cat1);
            let z2 = proj.forward(tape, vars, cat2);
            let total = losses::nt_xent(tape, z1, z2, tau)?;
            // the single joint loss is a cross-modality term: log it as l_mm
            Ok((0.0, 0.0, tape.value(total).item(), total))
        }
        MmStrategy::Simclr => {
            let pd = model.proj_derm.as_ref().unwrap();
            let pc = model.proj_clinic.as_ref().unwrap();
            let zd1 = pd.forward(tape, vars, hd1);
            let zd2 = pd.forward(tape, vars, hd2);
            let zc1 = pc.forward(tape, vars, hc1);
            let zc2 = pc.forward(tape, vars, hc2);
            let l_derm = losses::nt_xent(tape, zd1, zd2, tau)?;
            let l_clinic = losses::nt_xent(tape, zc1, zc2, tau)?;
            let total = tape.add(l_derm, l_clinic);
            Ok((
                tape.value(l_derm).item(),
                tape.value(l_clinic).item(),
                0.0,
                total,
            ))
        }
        MmStrategy::SepShared | MmStrategy::SepSep => {
            let pd = model.proj_derm.as_ref().unwrap();
            let pc = model.proj_clinic.as_ref().unwrap();
            let md = model.mm_proj_derm.as_ref().unwrap();
            let mc = model.mm_proj_clinic.as_ref().unwrap();
            let zd1 = pd.forward(tape, vars, hd1);
            let zd2 = pd.forward(tape, vars, hd2);
            let zc1 = pc.forward(tape, vars, hc1);
            let zc2 = pc.forward(tape, vars, hc2);
            let md1 = md.forward(tape, vars, hd1);
            let md2 = md.forward(tape, vars, hd2);
            let mc1 = mc.forward(tape, vars, hc1);
            let mc2 = mc.forward(tape, vars, hc2);
            let terms = losses::l_ssl(
                tape,
                zd1,
                zd2,
                zc1,
                zc2,
                md1,
                md2,
                mc1,
                mc2,
                tau,
                run.train.mirror_mm,
            )?;
            Ok((
                tape.value(terms.l_derm).item(),
                tape.value(terms.l_clinic).item(),
                tape.value(terms.l_mm).item(),
                terms.total,
            ))
        }
    }
}

fn epoch_batches(train: &[usize], batch_size: usize, seed: u64, epoch: usize, drop_last: bool) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    let mut rng = derived_rng(seed, "shuffle", &[epoch as u64]);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if drop_last {
        batches.retain(|b| b.len() == batch_size);
    }
    batches
}

/// Stage-1 multi-modality SSL. Deterministic given (seed, config, dataset).
pub fn pretrain_mm(dataset: &Dataset, run: &RunConfig) -> Result<Checkpoint> {
    run.validate()?;
    let model = Sm3Model::from_run(run);
    let stage = &run.train.stage1;
    if dataset.train.len() < stage.batch_size {
        return Err(Error::Config(format!(
            "train split ({}) smaller than stage-1 batch size ({}); incomplete batches are dropped",
            dataset.train.len(),
            stage.batch_size
        )));
    }
    let mut params = ParamSet::new();
    model.init_stage1(&mut params, run.train.seed);
    let mut opt = AdamW::new(
        stage.learning_rate,
        run.train.beta1,
        run.train.beta2,
        run.train.weight_decay,
    );
    let mut history = Vec::with_capacity(stage.epochs);
    for epoch in 0..stage.epochs {
        let batches = epoch_batches(&dataset.train, stage.batch_size, run.train.seed, epoch, true);
        let mut sums = [0.0f64; 3];
        for batch in &batches {
            let views = augmented_views(dataset, batch, run, epoch);
            let mut tape = Tape::new();
            let vars = ParamVars::bind(&mut tape, &params);
            let (ld, lc, lmm, total) = stage1_loss(&model, &mut tape, &vars, &views, run)?;
            let total_v = tape.value(total).item();
            if !total_v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
            }
            tape.backward(total);
            let grads = vars.grads(&tape);
            opt.step(&mut params, &grads, |_| true)?;
            sums[0] += ld;
            sums[1] += lc;
            sums[2] += lmm;
        }
        let nb = batches.len() as f64;
        // the logged total is defined as the sum of the logged components,
        // so the component accounting holds bitwise at every epoch
        let (a, b, c) = (sums[0] / nb, sums[1] / nb, sums[2] / nb);
        history.push(vec![a, b, c, a + b + c]);
    }
    Ok(Checkpoint {
        run: run.clone(),
        stage: "mm".into(),
        epoch: stage.epochs,
        loss_columns: vec!["l_derm".into(), "l_clinic".into(), "l_mm".into(), "l_total".into()],
        loss_history: history,
        params,
    })
}

/// Raw (derm, clinic) input matrices for the given sample indices.
pub fn batch_inputs(dataset: &Dataset, indices: &[usize]) -> (Tensor, Tensor) {
    (
        batch_matrix(dataset, indices, |s| &s.derm),
        batch_matrix(dataset, indices, |s| &s.clinic),
    )
}

/// Concatenated backbone features for the given sample indices, without
/// augmentation.
pub fn concat_features(
    model: &Sm3Model,
    params: &ParamSet,
    dataset: &Dataset,
    indices: &[usize],
) -> Tensor {
    let derm = batch_matrix(dataset, indices, |s| &s.derm);
    let clinic = batch_matrix(dataset, indices, |s| &s.clinic);
    let mut tape = Tape::new();
    let vars = ParamVars::bind_trainable(&mut tape, params, |_| false);
    let d = tape.constant(derm);
    let c = tape.constant(clinic);
    let h = model.features(&mut tape, &vars, d, c);
    tape.value(h).clone()
}

/// Stage-2 multi-label SSL on top of a stage-1 checkpoint. Each epoch
/// re-embeds the train split, regenerates pseudo-labels by clustering, and
/// minimizes the multi-head cross-entropy. Encoders stay frozen unless
/// configured otherwise.
pub fn pretrain_ml(dataset: &Dataset, stage1: &Checkpoint, run: &RunConfig) -> Result<Checkpoint> {
    run.validate()?;
    if stage1.stage != "mm" {
        return Err(Error::Config(format!(
            "stage-2 pretraining needs an \"mm\" checkpoint, got {:?}",
            stage1.stage
        )));
    }
    if stage1.run.generator.dim_derm != dataset.config.dim_derm
        || stage1.run.generator.dim_clinic != dataset.config.dim_clinic
    {
        return Err(Error::Config(
            "checkpoint modality dims do not match the dataset".into(),
        ));
    }
    let model = Sm3Model::from_run(run);
    let stage = &run.train.stage2;
    let mut params = stage1.params.clone();
    model.init_stage2(&mut params, run.train.seed);
    let trainable = |name: &str| -> bool {
        if Sm3Model::is_encoder_param(name) {
            run.train.unfreeze_encoders_stage2
        } else {
            name.starts_with("label_proj")
                || name.starts_with("relation")
                || name.starts_with("class_head")
        }
    };
    let mut opt = AdamW::new(
        stage.learning_rate,
        run.train.beta1,
        run.train.beta2,
        run.train.weight_decay,
    );
    let mut history = Vec::with_capacity(stage.epochs);
    let mut last_pseudo: Option<PseudoLabelSet> = None;
    for epoch in 0..stage.epochs {
        // (1) embed all train samples, (2) regenerate pseudo-labels
        let h_cat = concat_features(&model, &params, dataset, &dataset.train);
        let embeddings =
            model.label_embeddings(&params, &h_cat, run.train.cluster_pre_relation);
        let pseudo = generate_pseudo_multilabels(
            &embeddings,
            &model.class_counts,
            run.train.seed,
            epoch,
        )?;
        // (3) minimize the multi-head cross-entropy
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(&dataset.train, stage.batch_size, run.train.seed, epoch, false);
        for batch in &batches {
            // map dataset indices back to train-split positions for labels
            let positions: Vec<usize> = batch
                .iter()
                .map(|&i| dataset.train.iter().position(|&t| t == i).unwrap())
                .collect();
            let targets: Vec<Vec<usize>> = (0..model.class_counts.len())
                .map(|k| positions.iter().map(|&p| pseudo.assignments[p][k]).collect())
                .collect();
            let derm = batch_matrix(dataset, batch, |s| &s.derm);
            let clinic = batch_matrix(dataset, batch, |s| &s.clinic);
            let mut tape = Tape::new();
            let vars = ParamVars::bind_trainable(&mut tape, &params, |n| trainable(n));
            let d = tape.constant(derm);
            let c = tape.constant(clinic);
            let h = model.features(&mut tape, &vars, d, c);
            let mut drop_rng = derived_rng(run.train.seed, "dropout", &[epoch as u64, batch[0] as u64]);
            let logits = model.classifier_logits(&mut tape, &vars, h, Some(&mut drop_rng));
            let loss = losses::multilabel_ce(&mut tape, &logits, &targets)?;
            let loss_v = tape.value(loss).item();
            if !loss_v.is_finite() {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
            }
            tape.backward(loss);
            let grads = vars.grads(&tape);
            opt.step(&mut params, &grads, |n| trainable(n))?;
            epoch_loss += loss_v * batch.len() as f64;
        }
        history.push(vec![epoch_loss / dataset.train.len() as f64]);
        last_pseudo = Some(pseudo);
    }
    let _ = last_pseudo;
    Ok(Checkpoint {
        run: run.clone(),
        stage: "ml".into(),
        epoch: stage.epochs,
        loss_columns: vec!["l_ce".into()],
        loss_history: history,
        params,
    })
}

/// Modality embeddings used for pair matching: the cross-modality head
/// outputs when the strategy has them, raw encoder features otherwise.
pub fn pairmatch_embeddings(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    indices: &[usize],
) -> (Tensor, Tensor) {
    let model = Sm3Model::from_run(&ckpt.run);
    let derm = batch_matrix(dataset, indices, |s| &s.derm);
    let clinic = batch_matrix(dataset, indices, |s| &s.clinic);
    let mut tape = Tape::new();
    let vars = ParamVars::bind_trainable(&mut tape, &ckpt.params, |_| false);
    let d = tape.constant(derm);
    let c = tape.constant(clinic);
    let hd = model.encoder_derm.forward(&mut tape, &vars, d);
    let hc = model.encoder_clinic.forward(&mut tape, &vars, c);
    match (&model.mm_proj_derm, &model.mm_proj_clinic) {
        (Some(md), Some(mc)) => {
            let zd = md.forward(&mut tape, &vars, hd);
            let zc = mc.forward(&mut tape, &vars, hc);
            (tape.value(zd).clone(), tape.value(zc).clone())
        }
        _ => (tape.value(hd).clone(), tape.value(hc).clone()),
    }
}
