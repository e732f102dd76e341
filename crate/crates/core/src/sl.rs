//! Continual supervised learning: random-label and permuted-pixel
//! classification task sequences over IDX-format image data, trained
//! with softmax cross-entropy. A procedurally generated 16×16 digit-like
//! fixture dataset stands in for MNIST so nothing here needs a network
//! connection; real IDX files load through the same parser.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{sample_disjoint_indices, UpdatePlugins};
use crate::baselines::l2_init_penalty;
use crate::churn::{chain_step, log_softmax, mode_outputs};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Network, ParamVector};
use crate::optim::Optimizer;
use crate::rng::{stream_rng, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Image classification data: pixels scaled to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// count × pixel_count, row-major.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixel_count(&self) -> usize {
        self.rows * self.cols
    }
}

fn read_u32_be(bytes: &[u8], off: usize, what: &str) -> Result<u32> {
    if off + 4 > bytes.len() {
        return Err(Error::Length(format!("truncated IDX file reading {what}")));
    }
    Ok(u32::from_be_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]))
}

/// Parses big-endian IDX image/label file pairs (the MNIST distribution
/// format): images magic 0x00000803 with count×rows×cols unsigned bytes,
/// labels magic 0x00000801. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    parse_idx(&img_bytes, &lbl_bytes)
}

pub fn parse_idx(img_bytes: &[u8], lbl_bytes: &[u8]) -> Result<Dataset> {
    let magic = read_u32_be(img_bytes, 0, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("bad image magic {magic:#010x}")));
    }
    let count = read_u32_be(img_bytes, 4, "image count")? as usize;
    let rows = read_u32_be(img_bytes, 8, "image rows")? as usize;
    let cols = read_u32_be(img_bytes, 12, "image cols")? as usize;
    let pixels = count * rows * cols;
    if img_bytes.len() != 16 + pixels {
        return Err(Error::Length(format!(
            "image payload is {} bytes, header implies {}",
            img_bytes.len() - 16.min(img_bytes.len()),
            pixels
        )));
    }

    let lbl_magic = read_u32_be(lbl_bytes, 0, "label magic")?;
    if lbl_magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("bad label magic {lbl_magic:#010x}")));
    }
    let lbl_count = read_u32_be(lbl_bytes, 4, "label count")? as usize;
    if lbl_bytes.len() != 8 + lbl_count {
        return Err(Error::Length("label payload does not match its header".into()));
    }
    if lbl_count != count {
        return Err(Error::Length(format!(
            "{count} images but {lbl_count} labels"
        )));
    }

    let mut images = Matrix::zeros(count, rows * cols);
    for i in 0..pixels {
        images.data_mut()[i] = img_bytes[16 + i] as f64 / 255.0;
    }
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Ok(Dataset { images, labels, classes, rows, cols })
}

/// Serializes a dataset back to IDX byte pairs (images, labels).
pub fn to_idx_bytes(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + ds.len() * ds.pixel_count());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    img.extend_from_slice(&(ds.rows as u32).to_be_bytes());
    img.extend_from_slice(&(ds.cols as u32).to_be_bytes());
    for v in ds.images.data() {
        img.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    let mut lbl = Vec::with_capacity(8 + ds.len());
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lbl.extend(ds.labels.iter().map(|&l| l as u8));
    (img, lbl)
}

/// Procedurally generated 16×16 digit-like dataset: each class is a
/// fixed stroke glyph rendered with per-sample jitter, pixel noise, and
/// intensity variation. Deterministic in (per_class, seed).
pub fn synthetic_digits(per_class: usize, seed: u64) -> Dataset {
    let (rows, cols) = (16usize, 16usize);
    let classes = 10usize;
    let count = per_class * classes;
    let mut images = Matrix::zeros(count, rows * cols);
    let mut labels = Vec::with_capacity(count);
    let mut rng = stream_rng(seed, Stream::SlTasks, 0);
    // Glyph strokes per class on a 16x16 canvas: (x0, y0, x1, y1) lines.
    let strokes: [&[(f64, f64, f64, f64)]; 10] = [
        &[(4.0, 3.0, 11.0, 3.0), (11.0, 3.0, 11.0, 12.0), (11.0, 12.0, 4.0, 12.0), (4.0, 12.0, 4.0, 3.0)],
        &[(8.0, 2.0, 8.0, 13.0), (5.0, 5.0, 8.0, 2.0)],
        &[(4.0, 4.0, 11.0, 4.0), (11.0, 4.0, 11.0, 8.0), (11.0, 8.0, 4.0, 12.0), (4.0, 12.0, 11.0, 12.0)],
        &[(4.0, 3.0, 11.0, 3.0), (11.0, 3.0, 6.0, 7.0), (6.0, 7.0, 11.0, 11.0), (11.0, 11.0, 4.0, 13.0)],
        &[(9.0, 2.0, 4.0, 9.0), (4.0, 9.0, 12.0, 9.0), (9.0, 2.0, 9.0, 13.0)],
        &[(11.0, 3.0, 4.0, 3.0), (4.0, 3.0, 4.0, 8.0), (4.0, 8.0, 11.0, 8.0), (11.0, 8.0, 11.0, 12.0), (11.0, 12.0, 4.0, 12.0)],
        &[(10.0, 2.0, 5.0, 8.0), (5.0, 8.0, 5.0, 12.0), (5.0, 12.0, 11.0, 12.0), (11.0, 12.0, 11.0, 8.0), (11.0, 8.0, 5.0, 8.0)],
        &[(4.0, 3.0, 12.0, 3.0), (12.0, 3.0, 6.0, 13.0)],
        &[(5.0, 3.0, 10.0, 3.0), (10.0, 3.0, 10.0, 7.0), (10.0, 7.0, 5.0, 7.0), (5.0, 7.0, 5.0, 3.0), (5.0, 7.0, 5.0, 12.0), (5.0, 12.0, 10.0, 12.0), (10.0, 12.0, 10.0, 7.0)],
        &[(10.0, 8.0, 5.0, 8.0), (5.0, 8.0, 5.0, 4.0), (5.0, 4.0, 10.0, 4.0), (10.0, 4.0, 10.0, 13.0)],
    ];
    let mut idx = 0;
    for class in 0..classes {
        for _ in 0..per_class {
            let dx = rng.gen::<f64>() * 3.0 - 1.5;
            let dy = rng.gen::<f64>() * 3.0 - 1.5;
            let intensity = 0.7 + 0.3 * rng.gen::<f64>();
            let row = &mut images.data_mut()[idx * rows * cols..(idx + 1) * rows * cols];
            for &(x0, y0, x1, y1) in strokes[class] {
                let steps = 24;
                for s in 0..=steps {
                    let t = s as f64 / steps as f64;
                    let x = x0 + t * (x1 - x0) + dx;
                    let y = y0 + t * (y1 - y0) + dy;
                    let (xi, yi) = (x.round() as isize, y.round() as isize);
                    if (0..cols as isize).contains(&xi) && (0..rows as isize).contains(&yi) {
                        let p = yi as usize * cols + xi as usize;
                        row[p] = (row[p] + intensity).min(1.0);
                    }
                }
            }
            // Sparse pixel noise.
            for _ in 0..8 {
                let p = rng.gen_range(0..rows * cols);
                row[p] = (row[p] + rng.gen::<f64>() * 0.3).min(1.0);
            }
            labels.push(class);
            idx += 1;
        }
    }
    Dataset { images, labels, classes, rows, cols }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlTaskKind {
    /// Fresh uniform-random labels on a fresh subset each task.
    RandomLabel,
    /// A fixed random pixel permutation applied to every image.
    Permuted,
}

/// One supervised task: the data subset plus its label map or pixel
/// permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlTaskSpec {
    pub kind: SlTaskKind,
    pub subset_indices: Vec<usize>,
    /// Random labels per subset element (random-label tasks).
    pub label_map: Option<Vec<usize>>,
    /// Bijection over pixel indices (permuted tasks).
    pub pixel_permutation: Option<Vec<usize>>,
    pub epochs_per_task: usize,
}

/// Builds a continual SL sequence, deterministic in the seed.
pub fn make_sl_sequence(
    dataset: &Dataset,
    kind: SlTaskKind,
    num_tasks: usize,
    per_task_n: usize,
    epochs_per_task: usize,
    seed: u64,
) -> Result<Vec<SlTaskSpec>> {
    if per_task_n > dataset.len() {
        return Err(Error::Config(format!(
            "per-task sample count {per_task_n} exceeds dataset size {}",
            dataset.len()
        )));
    }
    if num_tasks == 0 || epochs_per_task == 0 {
        return Err(Error::Config("task and epoch counts must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::SlTasks, 1);
    let mut tasks = Vec::with_capacity(num_tasks);
    for _ in 0..num_tasks {
        let subset = sample_disjoint_indices(dataset.len(), &[], per_task_n, &mut rng);
        let (label_map, pixel_permutation) = match kind {
            SlTaskKind::RandomLabel => {
                let labels = (0..per_task_n).map(|_| rng.gen_range(0..dataset.classes)).collect();
                (Some(labels), None)
            }
            SlTaskKind::Permuted => {
                let mut perm: Vec<usize> = (0..dataset.pixel_count()).collect();
                for i in (1..perm.len()).rev() {
                    let j = rng.gen_range(0..=i);
                    perm.swap(i, j);
                }
                (None, Some(perm))
            }
        };
        tasks.push(SlTaskSpec {
            kind,
            subset_indices: subset,
            label_map,
            pixel_permutation,
            epochs_per_task,
        });
    }
    Ok(tasks)
}

/// Materializes a task's inputs and labels.
pub fn task_data(dataset: &Dataset, task: &SlTaskSpec) -> (Matrix, Vec<usize>) {
    let n = task.subset_indices.len();
    let p = dataset.pixel_count();
    let mut x = Matrix::zeros(n, p);
    for (row, &src) in task.subset_indices.iter().enumerate() {
        let src_row = dataset.images.row(src);
        let dst = x.row_mut(row);
        match &task.pixel_permutation {
            Some(perm) => {
                for (dst_p, &src_p) in perm.iter().enumerate() {
                    dst[dst_p] = src_row[src_p];
                }
            }
            None => dst.copy_from_slice(src_row),
        }
    }
    let labels = match &task.label_map {
        Some(map) => map.clone(),
        None => task.subset_indices.iter().map(|&i| dataset.labels[i]).collect(),
    };
    (x, labels)
}

/// Softmax cross-entropy −mean log p(label) with its analytic gradient.
pub fn cross_entropy_loss(
    net: &Network,
    x: &Matrix,
    labels: &[usize],
) -> Result<(f64, ParamVector)> {
    let b = x.rows();
    if labels.len() != b {
        return Err(Error::Dimension("labels must match the batch".into()));
    }
    let cache = net.forward(x)?;
    let classes = cache.outputs.cols();
    let mut dl = Matrix::zeros(b, classes);
    let mut loss = 0.0;
    for i in 0..b {
        let lp = log_softmax(cache.outputs.row(i));
        loss -= lp[labels[i]];
        for k in 0..classes {
            let p = lp[k].exp();
            let indicator = if k == labels[i] { 1.0 } else { 0.0 };
            dl.set(i, k, p - indicator);
        }
    }
    loss /= b as f64;
    let grad = net.backward(&cache, &dl)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct SlEpochStats {
    pub task: usize,
    pub epoch: usize,
    pub samples_seen: u64,
    /// Accuracy of predictions made online, before each minibatch update.
    pub online_accuracy: f64,
    pub loss: f64,
    pub churn_loss: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SlRunSummary {
    pub average_accuracy: f64,
    pub per_task_accuracy_len: usize,
}

/// Minibatch cross-entropy training over a task sequence. Per-task
/// online accuracy is the mean over that task's epochs; the summary's
/// average accuracy is the mean over tasks. The churn plugin snapshots
/// against epoch-start parameters.
pub fn train_sl(
    net: &mut Network,
    opt: &mut Optimizer,
    dataset: &Dataset,
    sequence: &[SlTaskSpec],
    minibatch: usize,
    plugins: &mut UpdatePlugins,
    agent_rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(&SlEpochStats),
) -> Result<(SlRunSummary, Vec<f64>)> {
    if net.config().policy_dim() != dataset.classes {
        return Err(Error::Config(format!(
            "network outputs {} classes, dataset has {}",
            net.config().policy_dim(),
            dataset.classes
        )));
    }
    let mut per_task = Vec::with_capacity(sequence.len());
    let mut samples_seen = 0u64;
    for (task_idx, task) in sequence.iter().enumerate() {
        let (x, labels) = task_data(dataset, task);
        let n = x.rows();
        let mut task_acc = 0.0;
        for epoch in 0..task.epochs_per_task {
            let epoch_start_net = plugins.churn.as_ref().map(|_| net.clone());
            let mut indices: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = agent_rng.gen_range(0..=i);
                indices.swap(i, j);
            }
            let mut correct = 0usize;
            let mut seen = 0usize;
            let mut loss_sum = 0.0;
            let mut churn_sum = 0.0;
            let mut lambda_sum = 0.0;
            let mut batches = 0usize;
            let mut start = 0;
            while start < n {
                let end = (start + minibatch).min(n);
                let mb: Vec<usize> = indices[start..end].to_vec();
                start = end;
                let xb = x.select_rows(&mb);
                let yb: Vec<usize> = mb.iter().map(|&i| labels[i]).collect();

                // Online accuracy at current parameters, before updating.
                let out = net.snapshot_outputs(&xb)?;
                for (r, &want) in yb.iter().enumerate() {
                    let row = out.row(r);
                    let mut best = 0;
                    for k in 1..row.len() {
                        if row[k] > row[best] {
                            best = k;
                        }
                    }
                    if best == want {
                        correct += 1;
                    }
                }
                seen += yb.len();

                if let Some(plugin) = plugins.churn.as_mut() {
                    let ref_count = plugin.cfg.ref_batch_size.min(n - mb.len());
                    if ref_count == 0 {
                        return Err(Error::Config("task too small for a reference batch".into()));
                    }
                    let ref_idx = sample_disjoint_indices(n, &mb, ref_count, agent_rng);
                    let ref_x = x.select_rows(&ref_idx);
                    let snap_net = epoch_start_net.as_ref().unwrap();
                    let snapshot = mode_outputs(snap_net, &ref_x, plugin.cfg.output_mode)?;
                    let l2 = plugins.l2_init_coeff;
                    let mut captured = 0.0;
                    let stats = chain_step(
                        net,
                        opt,
                        &mb,
                        &ref_idx,
                        &ref_x,
                        &snapshot,
                        |net| {
                            let (loss, mut g) = cross_entropy_loss(net, &xb, &yb)?;
                            captured = loss;
                            if let Some(c) = l2 {
                                let (_, g_l2) = l2_init_penalty(net.params(), net.init_params(), c)?;
                                g.axpy(&g_l2, 1.0);
                            }
                            Ok((loss, g))
                        },
                        &plugin.cfg,
                        &mut plugin.means,
                    )?;
                    loss_sum += captured;
                    churn_sum += stats.churn_loss;
                    lambda_sum += stats.lambda;
                } else {
                    let (loss, mut grad) = cross_entropy_loss(net, &xb, &yb)?;
                    if let Some(c) = plugins.l2_init_coeff {
                        let (_, g_l2) = l2_init_penalty(net.params(), net.init_params(), c)?;
                        grad.axpy(&g_l2, 1.0);
                    }
                    let new_params = opt.step(net.params(), &grad)?;
                    net.set_params(new_params)?;
                    loss_sum += loss;
                }
                if let Some(kappa) = plugins.clip_kappa {
                    let clipped = crate::baselines::weight_clip(net.params(), kappa);
                    net.set_params(clipped)?;
                }
                batches += 1;
            }
            samples_seen += seen as u64;
            let stats = SlEpochStats {
                task: task_idx,
                epoch,
                samples_seen,
                online_accuracy: correct as f64 / seen as f64,
                loss: loss_sum / batches as f64,
                churn_loss: churn_sum / batches as f64,
                lambda: lambda_sum / batches as f64,
            };
            task_acc += stats.online_accuracy;
            on_epoch(&stats);
        }
        per_task.push(task_acc / task.epochs_per_task as f64);
    }
    let average = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok((SlRunSummary { average_accuracy: average, per_task_accuracy_len: per_task.len() }, per_task))
}
