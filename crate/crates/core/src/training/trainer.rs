use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{lr_at, sgd_step, BatchSpec, PkSampler, TrainConfig};
use crate::data::LoadedSample;
use crate::decoder::model::param_fingerprint;
use crate::decoder::{FeatureExtractor, Gradients, OutputGrads, SavsModel};
use crate::error::{Result, SavsError};
use crate::exec::Exec;
use crate::losses::{circle_loss_embeddings, id_loss_with_grad, semantic_loss_with_grad, total_loss};
use crate::semantic_encoder::{
    build_pixel_pool, render_shielded, shielding_mask, BinaryMask, DrawMode, Image, ShieldClasses,
};

/// Decoded training samples with contiguous class labels.
#[derive(Debug, Clone)]
pub struct TrainSet {
    samples: Vec<LoadedSample>,
    labels: Vec<usize>,
    class_ids: Vec<u32>,
}

impl TrainSet {
    /// Class `i` is the `i`-th smallest person id.
    pub fn new(samples: Vec<LoadedSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(SavsError::Dataset("training split is empty".into()));
        }
        let mut class_ids: Vec<u32> = samples.iter().map(|s| s.record.person_id).collect();
        class_ids.sort_unstable();
        class_ids.dedup();
        let labels = samples
            .iter()
            .map(|s| {
                class_ids
                    .binary_search(&s.record.person_id)
                    .expect("id collected above")
            })
            .collect();
        Ok(TrainSet {
            samples,
            labels,
            class_ids,
        })
    }

    pub fn samples(&self) -> &[LoadedSample] {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn person_ids(&self) -> Vec<u32> {
        self.samples.iter().map(|s| s.record.person_id).collect()
    }
}

/// Losses of one optimizer step plus stream fingerprints taken after the
/// update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub id_loss: f64,
    pub circle_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
    pub original_stream_fingerprint: u64,
    pub shielded_stream_fingerprint: u64,
}

/// Per-epoch means of each loss component; one row of the loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub id_loss: f64,
    pub circle_loss: f64,
    pub semantic_loss: f64,
    pub total: f64,
    pub lr: f64,
}

/// Replaces the `shield` classes of every sample with draws from a pool
/// built from this batch alone.
pub fn shield_batch(
    images: &[&Image],
    masks: Vec<BinaryMask>,
    pool_seed: u64,
    draw_seed: u64,
    mode: DrawMode,
) -> Result<Vec<Image>> {
    let images: Vec<Image> = images.iter().map(|&i| i.clone()).collect();
    let pool = build_pixel_pool(&images, &masks, pool_seed)?;
    Ok(render_shielded(&images, &masks, &pool, draw_seed, mode)?.images)
}

fn shield_samples(
    samples: &[&LoadedSample],
    shield: &ShieldClasses,
    pool_seed: u64,
    draw_seed: u64,
    mode: DrawMode,
) -> Result<Vec<Image>> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let masks = samples.iter().map(|s| shielding_mask(&s.semantic, shield)).collect();
    shield_batch(&images, masks, pool_seed, draw_seed, mode)
}

fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

/// Owns the model and optimizer state of one run.
///
/// Three independent random streams derive from the seed: parameter
/// initialization, batch sampling and pixel-pool shuffling.
pub struct Trainer {
    cfg: TrainConfig,
    model: SavsModel,
    velocity: Vec<Vec<f64>>,
    exec: Exec,
    sampler_rng: ChaCha8Rng,
    pool_rng: ChaCha8Rng,
    epoch: usize,
    steps: usize,
    dump_dir: Option<PathBuf>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(cfg: TrainConfig, num_classes: usize, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let model = SavsModel::new(&cfg.model_config(num_classes), &mut stream(cfg.seed, 0))?;
        Ok(Self::from_model(cfg, model, exec))
    }

    /// Starts from given parameters with zero momentum.
    pub fn from_model(cfg: TrainConfig, model: SavsModel, exec: Exec) -> Self {
        let velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        Trainer {
            sampler_rng: stream(cfg.seed, 1),
            pool_rng: stream(cfg.seed, 2),
            cfg,
            model,
            velocity,
            exec,
            epoch: 0,
            steps: 0,
            dump_dir: None,
        }
    }

    /// Where a batch description is written when a step hits a non-finite
    /// value.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SavsModel {
        &self.model
    }

    pub fn into_model(self) -> SavsModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Forward, loss, backward and one SGD update on `batch`.
    pub fn step(&mut self, data: &TrainSet, batch: &BatchSpec, lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(SavsError::InvalidArgument("empty batch".into()));
        }
        let samples: Vec<&LoadedSample> = batch.indices.iter().map(|&i| &data.samples[i]).collect();
        let labels: Vec<usize> = batch.indices.iter().map(|&i| data.labels[i]).collect();
        let n = samples.len();
        let pool_seed: u64 = self.pool_rng.random();
        let draw_seed: u64 = self.pool_rng.random();
        let vcs = self.cfg.ablation.uses_vcs();
        let shielded = if vcs {
            Some(shield_samples(
                &samples,
                &self.cfg.shield_classes,
                pool_seed,
                draw_seed,
                self.cfg.draw_mode,
            )?)
        } else {
            None
        };

        let model = &self.model;
        let (outputs, caches): (Vec<_>, Vec<_>) = self
            .exec
            .try_map(n, |i| {
                model.forward_train(
                    &samples[i].image,
                    &samples[i].foreground,
                    shielded.as_ref().map(|s| &s[i]),
                )
            })?
            .into_iter()
            .unzip();

        let w = self.cfg.weights;
        let dim = model.embedding_dim();
        let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();
        let (l_id, d_logits) = id_loss_with_grad(&logits, &labels)?;
        let (l_cir, d_enh) = if w.circle > 0.0 {
            let enhanced: Vec<Vec<f64>> = outputs.iter().map(|o| o.enhanced.clone()).collect();
            circle_loss_embeddings(&enhanced, &labels, &self.cfg.circle, self.cfg.alpha_gradient)?
        } else {
            (0.0, vec![vec![0.0; dim]; n])
        };
        let (l_sem, d_fo, d_fs) = if vcs {
            let fo: Vec<Vec<f64>> = outputs.iter().map(|o| o.original.clone()).collect();
            let fs: Vec<Vec<f64>> = outputs
                .iter()
                .map(|o| o.shielded.clone().expect("shielded stream ran"))
                .collect();
            semantic_loss_with_grad(&fo, &fs, self.cfg.semantic_loss)?
        } else {
            (0.0, vec![vec![0.0; dim]; n], vec![vec![0.0; dim]; n])
        };
        let total = match total_loss(l_id, l_cir, l_sem, &w) {
            Ok(t) => t,
            Err(e) => return Err(self.dump(data, batch, &[l_id, l_cir, l_sem], e)),
        };

        let dout: Vec<OutputGrads> = (0..n)
            .map(|i| OutputGrads {
                enhanced: scaled(&d_enh[i], w.circle),
                original: scaled(&d_fo[i], w.semantic),
                shielded: vcs.then(|| scaled(&d_fs[i], w.semantic)),
                logits: scaled(&d_logits[i], w.id),
            })
            .collect();
        let per_sample = self.exec.map(n, |i| {
            let mut g = model.zero_grads();
            model.backward(&caches[i], &dout[i], &mut g);
            g
        });
        let mut grads: Gradients = model.zero_grads();
        for g in &per_sample {
            grads.add_assign(g);
        }

        let mut params = self.model.params_mut();
        if let Err(e) = sgd_step(
            &mut params,
            &grads.0,
            &mut self.velocity,
            lr,
            self.cfg.momentum,
            self.cfg.weight_decay,
        ) {
            return Err(self.dump(data, batch, &[l_id, l_cir, l_sem], e));
        }
        self.steps += 1;
        Ok(StepReport {
            id_loss: l_id,
            circle_loss: l_cir,
            semantic_loss: l_sem,
            total,
            original_stream_fingerprint: param_fingerprint(&self.model.original_stream().params()),
            shielded_stream_fingerprint: param_fingerprint(&self.model.shielded_stream().params()),
        })
    }

    fn dump(&self, data: &TrainSet, batch: &BatchSpec, losses: &[f64], err: SavsError) -> SavsError {
        let SavsError::NonFinite { component } = err else {
            return err;
        };
        let Some(dir) = &self.dump_dir else {
            return SavsError::NonFinite { component };
        };
        let path = dir.join(format!("nonfinite_epoch{}_step{}.txt", self.epoch, self.steps));
        let mut text = format!(
            "error: non-finite value in {component}\nepoch {} step {}\nid_loss {} cir_loss {} sem_loss {}\n",
            self.epoch, self.steps, losses[0], losses[1], losses[2]
        );
        for &i in &batch.indices {
            let s = &data.samples[i];
            let _ = writeln!(
                text,
                "{}\t{}\t{}",
                data.labels[i],
                s.record.image_path.display(),
                s.record.mask_path.display()
            );
        }
        let written = fs::create_dir_all(dir).and_then(|_| fs::write(&path, text));
        let note = match written {
            Ok(()) => format!("batch dump: {}", path.display()),
            Err(e) => format!("batch dump failed: {e}"),
        };
        SavsError::NonFinite {
            component: format!("{component} ({note})"),
        }
    }

    /// Runs one pass of the sampler and returns the epoch means.
    pub fn run_epoch(&mut self, data: &TrainSet, sampler: &PkSampler) -> Result<EpochLosses> {
        let lr = lr_at(self.epoch, &self.cfg);
        let batches = sampler.epoch(&mut self.sampler_rng);
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            let r = self.step(data, batch, lr)?;
            debug!("epoch {} step {}: total {:.5}", self.epoch, self.steps, r.total);
            for (s, v) in sums
                .iter_mut()
                .zip([r.id_loss, r.circle_loss, r.semantic_loss, r.total])
            {
                *s += v;
            }
        }
        let m = batches.len() as f64;
        let out = EpochLosses {
            epoch: self.epoch,
            id_loss: sums[0] / m,
            circle_loss: sums[1] / m,
            semantic_loss: sums[2] / m,
            total: sums[3] / m,
            lr,
        };
        self.epoch += 1;
        Ok(out)
    }

    /// Trains up to `cfg.epochs`, calling `on_epoch` after each epoch.
    pub fn train(&mut self, data: &TrainSet, mut on_epoch: impl FnMut(&EpochLosses)) -> Result<Vec<EpochLosses>> {
        if data.num_classes() != self.model.num_classes() {
            return Err(SavsError::Config(format!(
                "model has {} classes, training set {}",
                self.model.num_classes(),
                data.num_classes()
            )));
        }
        let sampler = PkSampler::new(&data.person_ids(), self.cfg.batch_size, self.cfg.images_per_id)?;
        let mut trace = Vec::new();
        while self.epoch < self.cfg.epochs {
            let e = self.run_epoch(data, &sampler)?;
            info!(
                "epoch {:>3}  id {:.4}  cir {:.4}  sem {:.4}  total {:.4}  lr {:.2e}",
                e.epoch, e.id_loss, e.circle_loss, e.semantic_loss, e.total, e.lr
            );
            on_epoch(&e);
            trace.push(e);
        }
        Ok(trace)
    }
}

/// CSV with header `epoch,id_loss,cir_loss,sem_loss,total,lr`.
pub fn write_loss_trace(path: &Path, trace: &[EpochLosses]) -> Result<()> {
    let to_err = |e: csv::Error| SavsError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(["epoch", "id_loss", "cir_loss", "sem_loss", "total", "lr"])
        .map_err(to_err)?;
    for e in trace {
        w.write_record([
            e.epoch.to_string(),
            e.id_loss.to_string(),
            e.circle_loss.to_string(),
            e.semantic_loss.to_string(),
            e.total.to_string(),
            e.lr.to_string(),
        ])
        .map_err(to_err)?;
    }
    w.flush().map_err(|e| SavsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SampleRecord, Split};
    use crate::decoder::{Ablation, ConvSpec};
    use crate::semantic_encoder::SemanticMap;

    /// Tiny striped people on 16×16 canvases, 4 ids × 3 images.
    pub(crate) fn toy_set() -> TrainSet {
        let mut samples = Vec::new();
        for pid in 0..4u32 {
            for seq in 0..3u32 {
                let mut labels = vec![0u8; 256];
                let mut pixels = vec![[0.2f32, 0.3, 0.1]; 256];
                for y in 2..14 {
                    for x in 5..11 {
                        let class = if y < 5 {
                            1
                        } else if y < 9 {
                            2
                        } else if y < 11 {
                            3
                        } else {
                            5
                        };
                        labels[y * 16 + x] = class;
                        let t = (pid as f32 + 1.0) / 5.0;
                        pixels[y * 16 + x] = [t, class as f32 / 6.0, (seq as f32 + x as f32) / 20.0];
                    }
                }
                let record = SampleRecord {
                    split: Split::Train,
                    person_id: pid * 10,
                    clothing_id: 0,
                    seq,
                    image_path: format!("{pid}_{seq}.png").into(),
                    mask_path: format!("{pid}_{seq}.mask.png").into(),
                };
                let image = Image::new(16, 16, pixels).unwrap();
                let sem = SemanticMap::from_indices(16, 16, &labels).unwrap();
                samples.push(LoadedSample::new(record, image, sem).unwrap());
            }
        }
        TrainSet::new(samples).unwrap()
    }

    pub(crate) fn toy_config(ablation: Ablation) -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: 4,
            images_per_id: 2,
            epochs: 2,
            decay_epoch: 1,
            lr0: 0.01,
            ablation,
            reduction: 2,
            ..TrainConfig::default()
        };
        cfg.extractor.input_height = 16;
        cfg.extractor.input_width = 16;
        cfg.extractor.layers = vec![
            ConvSpec {
                kernel: 4,
                stride: 2,
                out_channels: 4,
            },
            ConvSpec {
                kernel: 3,
                stride: 2,
                out_channels: 8,
            },
        ];
        cfg
    }

    #[test]
    fn labels_are_contiguous() {
        let set = toy_set();
        assert_eq!(set.class_ids(), &[0, 10, 20, 30]);
        assert_eq!(set.labels()[..4], [0, 0, 0, 1]);
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let set = toy_set();
        let cfg = toy_config(Ablation::HsaVcs);
        let mut t = Trainer::new(cfg, 4, Exec::Sequential).unwrap();
        let before = t.model().clone();
        let batch = BatchSpec {
            indices: vec![0, 1, 3, 4],
            person_ids: vec![0, 0, 10, 10],
        };
        let r = t.step(&set, &batch, 0.0).unwrap();
        assert!(r.total.is_finite());
        assert_eq!(t.model(), &before);
    }

    #[test]
    fn same_seed_same_trace_across_exec_modes() {
        let set = toy_set();
        let run = |exec| {
            let mut t = Trainer::new(toy_config(Ablation::HsaVcs), 4, exec).unwrap();
            let trace = t.train(&set, |_| {}).unwrap();
            (trace, t.into_model())
        };
        let (a, ma) = run(Exec::Sequential);
        let (b, mb) = run(Exec::Parallel);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|e| e.total.is_finite()));
        assert_eq!(a[1].lr, 0.01 * 0.1);
    }

    #[test]
    fn steps_keep_stream_fingerprints_equal() {
        let set = toy_set();
        let mut t = Trainer::new(toy_config(Ablation::HsaVcs), 4, Exec::Parallel).unwrap();
        let sampler = PkSampler::new(&set.person_ids(), 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut last = None;
        for batch in sampler.epoch(&mut rng) {
            let r = t.step(&set, &batch, 0.05).unwrap();
            assert_eq!(r.original_stream_fingerprint, r.shielded_stream_fingerprint);
            assert_ne!(Some(r.original_stream_fingerprint), last);
            last = Some(r.original_stream_fingerprint);
        }
    }

    #[test]
    fn zero_semantic_weight_and_no_shielding_match_the_hsa_ablation() {
        let set = toy_set();
        let mut full = toy_config(Ablation::HsaVcs);
        full.weights.semantic = 0.0;
        full.shield_classes = ShieldClasses::none();
        let hsa = TrainConfig {
            ablation: Ablation::Hsa,
            ..full.clone()
        };
        let mut a = Trainer::new(full, 4, Exec::Sequential).unwrap();
        let mut b = Trainer::new(hsa, 4, Exec::Sequential).unwrap();
        let ta = a.train(&set, |_| {}).unwrap();
        let tb = b.train(&set, |_| {}).unwrap();
        assert_eq!(ta, tb);
        let pa: Vec<Vec<f64>> = a.model().params().iter().map(|p| p.data.clone()).collect();
        let pb: Vec<Vec<f64>> = b.model().params().iter().map(|p| p.data.clone()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_dump() {
        let set = toy_set();
        let mut t = Trainer::new(toy_config(Ablation::Baseline), 4, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.set_dump_dir(dir.path());
        let batch = BatchSpec {
            indices: vec![0, 1, 3, 4],
            person_ids: vec![0, 0, 10, 10],
        };
        let mut model = t.model().clone();
        for p in model.params_mut() {
            if p.name == "classifier.bias" {
                p.data[0] = f64::NAN;
            }
        }
        let mut t = Trainer::from_model(t.config().clone(), model, Exec::Sequential);
        t.set_dump_dir(dir.path());
        let err = t.step(&set, &batch, 0.1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("id loss"), "{msg}");
        assert!(msg.contains("batch dump"), "{msg}");
        let dumped = fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(dumped, 1);
    }

    #[test]
    fn loss_trace_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let row = EpochLosses {
            epoch: 0,
            id_loss: 1.5,
            circle_loss: 2.0,
            semantic_loss: 0.25,
            total: 3.75,
            lr: 0.0035,
        };
        write_loss_trace(&path, &[row]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,id_loss,cir_loss,sem_loss,total,lr\n0,1.5,2,0.25,3.75,0.0035\n"
        );
    }
}
