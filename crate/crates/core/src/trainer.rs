//! Training loop machinery: learning-rate schedule, the per-step dual-stream
//! forward/backward, and inference embedding extraction.
//!
//! Per step, geometric augmentations run once per source sample; the raw
//! stream then branches through the clothes-color permutation plus random
//! erasing while the erased stream branches through clothing erasure, so both
//! streams see spatially identical pedestrians.

use ndarray::{Array2, IxDyn};
use rand::Rng;

use crate::augment::{
    apply_cda, erase_clothes, flip_crop, random_erase, sample_permutation, AugmentConfig,
};
use crate::autodiff::{Arr, ParamStore, Tape, Var};
use crate::backbone::images_to_tensor;
use crate::cam::cc_loss;
use crate::data::{LoadedDataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{identity_loss, total_loss, triplet_loss, LossBundle, LossWeights};
use crate::mcb::{hm_loss, multiscale_pool};
use crate::model::{Model, ModelConfig, StreamKind};
use crate::nn::{apply_buffer_updates, FwdCtx};
use crate::optim::AdamW;
use crate::rng::{derive, mix, PURPOSE_AUGMENT, PURPOSE_INIT, PURPOSE_NOISE};
use crate::sac::{sc_loss, supervision_signal};

/// Warmup-then-step learning-rate schedule.
#[derive(Clone, Debug)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_start: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub total_epochs: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 3.5e-4,
            warmup_start: 3.5e-6,
            warmup_epochs: 10,
            decay_epochs: vec![40, 80],
            decay_factor: 10.0,
            total_epochs: 150,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let min_decay = self.decay_epochs.iter().copied().min();
        let ordered = self.decay_epochs.windows(2).all(|w| w[0] < w[1]);
        let ok = self.base_lr > 0.0
            && self.warmup_start > 0.0
            && self.decay_factor > 0.0
            && ordered
            && match min_decay {
                Some(d) => {
                    self.warmup_epochs < d
                        && self.decay_epochs.iter().all(|&e| e < self.total_epochs)
                }
                None => self.warmup_epochs < self.total_epochs,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                msg: format!(
                    "schedule must satisfy warmup < min(decay) < total, got warmup {}, decay {:?}, total {}",
                    self.warmup_epochs, self.decay_epochs, self.total_epochs
                ),
            })
        }
    }
}

/// Learning rate at an epoch: linear warmup from `warmup_start` to `base_lr`
/// over `warmup_epochs`, then divided by `decay_factor` at each decay epoch.
pub fn lr_at(epoch: usize, s: &Schedule) -> Result<f64> {
    if epoch >= s.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            total: s.total_epochs,
        });
    }
    if epoch < s.warmup_epochs {
        let frac = epoch as f64 / s.warmup_epochs as f64;
        return Ok(s.warmup_start + (s.base_lr - s.warmup_start) * frac);
    }
    let decays = s.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    Ok(s.base_lr / s.decay_factor.powi(decays as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainPosition {
    pub epoch: usize,
    pub step_in_epoch: usize,
}

impl TrainPosition {
    pub fn global_step(&self, steps_per_epoch: usize) -> u64 {
        (self.epoch * steps_per_epoch + self.step_in_epoch) as u64
    }
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub optim: AdamW,
    pub schedule: Schedule,
    pub weights: LossWeights,
    pub augment: AugmentConfig,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub steps_per_epoch: usize,
    pub position: TrainPosition,
}

impl Trainer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_cfg: ModelConfig,
        schedule: Schedule,
        weights: LossWeights,
        augment: AugmentConfig,
        p: usize,
        k: usize,
        weight_decay: f64,
        seed: u64,
        train_size: usize,
    ) -> Result<Self> {
        schedule.validate()?;
        weights.validate()?;
        augment.validate()?;
        if train_size == 0 {
            return Err(Error::InvalidConfig {
                msg: "training split is empty".to_string(),
            });
        }
        let mut store = ParamStore::new();
        let mut rng = derive(seed, &[PURPOSE_INIT]);
        let model = Model::new(&mut store, model_cfg, &mut rng)?;
        let optim = AdamW::new(&store, weight_decay);
        let steps_per_epoch = train_size.div_ceil(p * k).max(1);
        Ok(Self {
            model,
            store,
            optim,
            schedule,
            weights,
            augment,
            p,
            k,
            seed,
            steps_per_epoch,
            position: TrainPosition {
                epoch: 0,
                step_in_epoch: 0,
            },
        })
    }

    pub fn finished(&self) -> bool {
        self.position.epoch >= self.schedule.total_epochs
    }

    /// Builds both stream inputs from one batch: shared geometric
    /// augmentation, then color permutation + random erasing for the raw
    /// stream and clothing erasure for the erased stream.
    fn build_stream_inputs(
        &self,
        samples: &[Sample],
        epoch: usize,
        step: usize,
    ) -> Result<(Arr, Arr)> {
        let mut raw_images = Vec::with_capacity(samples.len());
        let mut erased_images = Vec::with_capacity(samples.len());
        for (slot, sample) in samples.iter().enumerate() {
            let mut rng = derive(
                self.seed,
                &[PURPOSE_AUGMENT, epoch as u64, step as u64, slot as u64],
            );
            let geo = flip_crop(sample, &self.augment, &mut rng)?;
            let mut raw = if self.augment.cda_enabled {
                let roll: f64 = rng.random();
                let perm = sample_permutation(&mut rng);
                if roll < self.augment.cda_prob {
                    apply_cda(&geo, perm)?
                } else {
                    geo.clone()
                }
            } else {
                geo.clone()
            };
            raw = random_erase(&raw, &self.augment, &mut rng);
            erased_images.push(erase_clothes(&geo)?.image);
            raw_images.push(raw.image);
        }
        let raw = images_to_tensor(&raw_images.iter().collect::<Vec<_>>())?;
        let erased = images_to_tensor(&erased_images.iter().collect::<Vec<_>>())?;
        Ok((raw, erased))
    }

    fn gaussian_noise(&self, shape: &[usize], epoch: usize, step: usize, stream: u64) -> Arr {
        let mut rng = derive(
            self.seed,
            &[PURPOSE_NOISE, epoch as u64, step as u64, stream],
        );
        crate::nn::standard_normal(&mut rng, shape)
    }

    /// One optimization step on a fresh PK batch. Deterministic given the
    /// serialized state and seed.
    pub fn train_step(&mut self, dataset: &LoadedDataset) -> Result<LossBundle> {
        let TrainPosition {
            epoch,
            step_in_epoch: step,
        } = self.position;
        let lr = lr_at(epoch, &self.schedule)?;
        let batch =
            dataset.pk_batch(self.p, self.k, mix(self.seed, &[epoch as u64, step as u64]))?;
        let labels_u32 = batch.labels();
        let labels: Vec<usize> = labels_u32.iter().map(|&l| l as usize).collect();
        let (raw_arr, erased_arr) = self.build_stream_inputs(&batch.samples, epoch, step)?;

        let tape = Tape::new();
        let ctx = FwdCtx::new(&tape, &self.store, true);
        let raw_in = tape.input(raw_arr);
        let erased_in = tape.input(erased_arr);

        let counterfactual = self
            .model
            .cfg
            .cam
            .as_ref()
            .map(|c| c.counterfactual)
            .unwrap_or(false);
        let cam_on = self.model.cfg.cam.is_some();
        let stride = self.model.cfg.backbone.total_stride();
        let in_shape = tape.shape(raw_in);
        let map_shape = [in_shape[0], in_shape[2] / stride, in_shape[3] / stride];

        let make_noise = |stream: u64| -> Option<Var> {
            (cam_on && counterfactual)
                .then(|| tape.input(self.gaussian_noise(&map_shape, epoch, step, stream)))
        };
        let noise_raw = make_noise(0);
        let noise_erased = make_noise(1);
        let out_raw = self
            .model
            .forward_stream(&ctx, raw_in, StreamKind::Raw, noise_raw)?;
        let out_erased =
            self.model
                .forward_stream(&ctx, erased_in, StreamKind::Erased, noise_erased)?;

        let zero = || tape.input(Arr::zeros(IxDyn(&[])));

        let hm = if self.model.cfg.mcb_enabled && !out_raw.taps.is_empty() {
            let raw_desc: Vec<Var> = out_raw
                .taps
                .iter()
                .map(|&t| multiscale_pool(&tape, t))
                .collect::<Result<_>>()?;
            let erased_desc: Vec<Var> = out_erased
                .taps
                .iter()
                .map(|&t| multiscale_pool(&tape, t))
                .collect::<Result<_>>()?;
            hm_loss(
                &tape,
                &raw_desc,
                &erased_desc,
                self.model.cfg.mcb_teacher_mode,
            )?
        } else {
            zero()
        };

        let sc = if self.model.cfg.sac_enabled {
            let g = supervision_signal(
                &tape.value(out_raw.class_maps),
                &tape.value(out_erased.class_maps),
                &labels,
            )?;
            let g_var = tape.input(g);
            let s_raw = crate::sac::saliency(&tape, out_raw.features);
            let s_erased = crate::sac::saliency(&tape, out_erased.features);
            sc_loss(&tape, g_var, s_raw, s_erased)?
        } else {
            zero()
        };

        let id_raw = identity_loss(&tape, out_raw.logits, &labels)?;
        let id_erased = identity_loss(&tape, out_erased.logits, &labels)?;
        let tri_raw = triplet_loss(&tape, out_raw.embedding, &labels_u32, self.weights.margin)?;
        let tri_erased = triplet_loss(
            &tape,
            out_erased.embedding,
            &labels_u32,
            self.weights.margin,
        )?;

        let use_cc = self.weights.lambda2 > 0.0;
        let cc_raw = match (use_cc, out_raw.effect_pooled) {
            (true, Some(z)) => cc_loss(&tape, z, &labels_u32)?,
            _ => zero(),
        };
        let cc_erased = match (use_cc, out_erased.effect_pooled) {
            (true, Some(z)) => cc_loss(&tape, z, &labels_u32)?,
            _ => zero(),
        };

        // mirror of losses::total_loss, assembled on the tape
        let t1 = tape.scale(tape.add(hm, sc), self.weights.lambda1);
        let t2 = tape.add(
            tape.add(tape.scale(cc_raw, self.weights.lambda2), id_raw),
            tri_raw,
        );
        let t3 = tape.add(
            tape.add(tape.scale(cc_erased, self.weights.lambda2), id_erased),
            tri_erased,
        );
        let total = tape.add(tape.add(t1, t2), t3);

        let bundle = LossBundle {
            id_raw: tape.scalar(id_raw),
            id_erased: tape.scalar(id_erased),
            tri_raw: tape.scalar(tri_raw),
            tri_erased: tape.scalar(tri_erased),
            cc_raw: tape.scalar(cc_raw),
            cc_erased: tape.scalar(cc_erased),
            hm: tape.scalar(hm),
            sc: tape.scalar(sc),
            total: tape.scalar(total),
        };
        bundle.check_finite()?;
        debug_assert!((total_loss(&bundle, &self.weights) - bundle.total).abs() <= 1e-12);

        let grads = tape.backward(total);
        let updates = ctx.take_buffer_updates();
        apply_buffer_updates(&mut self.store, updates);
        self.optim.step(&mut self.store, &grads, lr);

        self.position.step_in_epoch += 1;
        if self.position.step_in_epoch >= self.steps_per_epoch {
            self.position.step_in_epoch = 0;
            self.position.epoch += 1;
        }
        Ok(bundle)
    }

    /// Tab-separated log line for one finished step.
    pub fn log_line(epoch: usize, global_step: u64, lr: f64, b: &LossBundle) -> String {
        format!(
            "{epoch}\t{global_step}\t{lr:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            b.id_raw,
            b.id_erased,
            b.tri_raw,
            b.tri_erased,
            b.cc_raw,
            b.cc_erased,
            b.hm,
            b.sc,
            b.total
        )
    }

    pub const LOG_HEADER: &'static str =
        "#epoch\tstep\tlr\tL_id_r\tL_id_b\tL_tri_r\tL_tri_b\tL_cc_r\tL_cc_b\tL_hm\tL_sc\ttotal";

    /// Raw-stream classification accuracy over a whole split, inference mode.
    pub fn train_accuracy(&self, dataset: &LoadedDataset) -> Result<f64> {
        let mut correct = 0usize;
        for chunk in dataset.samples.chunks(32) {
            let logits = infer_logits(&self.model, &self.store, chunk)?;
            for (row, sample) in logits.rows().into_iter().zip(chunk) {
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                if pred == sample.identity as usize {
                    correct += 1;
                }
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

fn forward_infer(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
) -> Result<(Array2<f64>, Array2<f64>)> {
    let images: Vec<&image::RgbImage> = samples.iter().map(|s| &s.image).collect();
    let tensor = images_to_tensor(&images)?;
    let tape = Tape::new();
    let ctx = FwdCtx::new(&tape, store, false);
    let input = tape.input(tensor);
    let out = model.forward_stream(&ctx, input, StreamKind::Raw, None)?;
    let emb = tape.value(out.embedding);
    let logits = tape.value(out.logits);
    let d = emb.shape()[1];
    let i = logits.shape()[1];
    let to2 = |a: Arr, cols: usize| {
        Array2::from_shape_vec(
            (samples.len(), cols),
            a.as_standard_layout().iter().copied().collect(),
        )
        .unwrap()
    };
    Ok((to2(emb, d), to2(logits, i)))
}

/// Retrieval embeddings for a list of samples: raw stream only, inference
/// mode, no augmentation, parsing masks not required.
pub fn infer_embeddings(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
) -> Result<Array2<f64>> {
    let d = model.cfg.backbone.final_channels();
    let mut out = Array2::zeros((samples.len(), d));
    let mut row = 0;
    for chunk in samples.chunks(32) {
        let (emb, _) = forward_infer(model, store, chunk)?;
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&emb);
        row += chunk.len();
    }
    Ok(out)
}

fn infer_logits(model: &Model, store: &ParamStore, samples: &[Sample]) -> Result<Array2<f64>> {
    forward_infer(model, store, samples).map(|(_, logits)| logits)
}
