//! Synthetic dataset generation, batching, CSV ingestion and the raw image
//! container.

mod container;
mod csv;
mod synthetic;

pub use container::{read_images, write_images};
pub use csv::{
    load_labels_csv, load_predictions_csv, write_labels_csv, write_predictions_csv, CSV_HEADER,
    LabelRecord, PredictionRecord,
};
pub use synthetic::{gen_synthetic, sample_from_latent, SyntheticSpec, AU_RULES};

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::EvalSeries;
use crate::model::NUM_AUS;
use crate::objectives::BatchLabels;
use crate::tensor::Tensor;

/// A fully materialized dataset: flat image buffer plus labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub image_size: (usize, usize, usize),
    /// n * C*H*W, row-major per sample.
    pub images: Vec<f32>,
    pub labels: BatchLabels,
    pub frame_ids: Vec<String>,
    /// Ground-truth affect coordinates the labels were derived from.
    /// Available for synthetic data only; not exported.
    pub latents: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.n
    }

    pub fn is_empty(&self) -> bool {
        self.labels.n == 0
    }

    fn sample_stride(&self) -> usize {
        let (c, h, w) = self.image_size;
        c * h * w
    }

    /// Images of the given rows as an (B,C,H,W) tensor.
    pub fn gather_images(&self, rows: &[usize]) -> Tensor<f32> {
        let stride = self.sample_stride();
        let (c, h, w) = self.image_size;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            data.extend_from_slice(&self.images[r * stride..(r + 1) * stride]);
        }
        Tensor::new(vec![rows.len(), c, h, w], data).expect("image geometry")
    }

    pub fn gather_labels(&self, rows: &[usize]) -> BatchLabels {
        let l = &self.labels;
        BatchLabels {
            n: rows.len(),
            va: rows
                .iter()
                .flat_map(|&r| [l.va[r * 2], l.va[r * 2 + 1]])
                .collect(),
            au: rows
                .iter()
                .flat_map(|&r| l.au[r * NUM_AUS..(r + 1) * NUM_AUS].to_vec())
                .collect(),
            expr: rows.iter().map(|&r| l.expr[r]).collect(),
            mask_va: rows.iter().map(|&r| l.mask_va[r]).collect(),
            mask_au: rows.iter().map(|&r| l.mask_au[r]).collect(),
            mask_expr: rows.iter().map(|&r| l.mask_expr[r]).collect(),
        }
    }

    /// New dataset holding only the given rows, in order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let stride = self.sample_stride();
        let mut images = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            images.extend_from_slice(&self.images[r * stride..(r + 1) * stride]);
        }
        Dataset {
            image_size: self.image_size,
            images,
            labels: self.gather_labels(rows),
            frame_ids: rows.iter().map(|&r| self.frame_ids[r].clone()).collect(),
            latents: if self.latents.is_empty() {
                Vec::new()
            } else {
                rows.iter().map(|&r| self.latents[r]).collect()
            },
        }
    }

    /// Deterministic split into (train, validation) index lists.
    pub fn split_indices(&self, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
        let n_val = ((self.len() as f64) * val_fraction).round() as usize;
        let val = idx[..n_val].to_vec();
        let train = idx[n_val..].to_vec();
        (train, val)
    }

    /// Write `labels.csv` and `images.bin` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let records: Vec<LabelRecord> = (0..self.len())
            .map(|i| LabelRecord::from_labels(&self.frame_ids[i], &self.labels, i))
            .collect();
        write_labels_csv(&dir.join("labels.csv"), &records)?;
        write_images(
            &dir.join("images.bin"),
            self.image_size,
            self.len(),
            &self.images,
        )
    }

    /// Load a dataset previously written by [`Dataset::export`].
    pub fn load(dir: &Path) -> Result<Dataset> {
        let records = load_labels_csv(&dir.join("labels.csv"))?;
        let (image_size, images) = read_images(&dir.join("images.bin"))?;
        let n = records.len();
        let stride = image_size.0 * image_size.1 * image_size.2;
        if images.len() != n * stride {
            return Err(Error::Container(format!(
                "images.bin holds {} samples, labels.csv {}",
                images.len() / stride.max(1),
                n
            )));
        }
        let mut labels = BatchLabels {
            n,
            va: vec![0.0; 2 * n],
            au: vec![0.0; NUM_AUS * n],
            expr: vec![0; n],
            mask_va: vec![false; n],
            mask_au: vec![false; n],
            mask_expr: vec![false; n],
        };
        let mut frame_ids = Vec::with_capacity(n);
        for (i, rec) in records.iter().enumerate() {
            frame_ids.push(rec.frame_id.clone());
            if let Some((v, a)) = rec.va {
                labels.va[i * 2] = v;
                labels.va[i * 2 + 1] = a;
                labels.mask_va[i] = true;
            }
            if let Some(au) = rec.au {
                for (k, &bit) in au.iter().enumerate() {
                    labels.au[i * NUM_AUS + k] = bit as f32;
                }
                labels.mask_au[i] = true;
            }
            if let Some(e) = rec.expr {
                labels.expr[i] = e;
                labels.mask_expr[i] = true;
            }
        }
        labels.validate()?;
        Ok(Dataset {
            image_size,
            images,
            labels,
            frame_ids,
            latents: Vec::new(),
        })
    }
}

/// One training batch.
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: BatchLabels,
    pub rows: Vec<usize>,
}

/// Deterministically shuffled batches. A final short batch survives only if
/// it keeps at least two samples with valence/arousal present (the
/// concordance loss needs two); otherwise it merges into the previous batch.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch_size must be >= 2, got {batch_size}"
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    idx.shuffle(&mut rng);

    let mut chunks: Vec<Vec<usize>> = idx.chunks(batch_size).map(|c| c.to_vec()).collect();
    if let Some(last) = chunks.last() {
        if last.len() < batch_size && chunks.len() > 1 {
            let va_present = last
                .iter()
                .filter(|&&r| dataset.labels.mask_va[r])
                .count();
            if va_present < 2 {
                let tail = chunks.pop().expect("non-empty");
                chunks.last_mut().expect("previous batch").extend(tail);
            }
        }
    }

    Ok(chunks
        .into_iter()
        .map(|rows| Batch {
            images: dataset.gather_images(&rows),
            labels: dataset.gather_labels(&rows),
            rows,
        })
        .collect())
}

/// Outcome counts of an evaluation join.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct JoinReport {
    pub matched: usize,
    pub unmatched_predictions: usize,
    pub unmatched_labels: usize,
}

/// Inner-join predictions and labels on frame id; per task, keep only rows
/// whose label is present. Action-unit scores become activation flags at the
/// 0.5 threshold.
pub fn join_for_eval(
    preds: &[PredictionRecord],
    labels: &[LabelRecord],
) -> Result<(EvalSeries, JoinReport)> {
    let by_id: HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.frame_id.as_str(), p)).collect();
    let mut series = EvalSeries::default();
    let mut report = JoinReport::default();
    let mut seen = 0usize;
    for label in labels {
        let Some(pred) = by_id.get(label.frame_id.as_str()) else {
            report.unmatched_labels += 1;
            continue;
        };
        seen += 1;
        if let Some((v, a)) = label.va {
            series.valence_pred.push(pred.valence as f64);
            series.valence_true.push(v as f64);
            series.arousal_pred.push(pred.arousal as f64);
            series.arousal_true.push(a as f64);
        }
        if let Some(au) = label.au {
            for k in 0..NUM_AUS {
                series.au_pred.push(pred.au_scores[k] >= 0.5);
                series.au_true.push(au[k] != 0);
            }
        }
        if let Some(e) = label.expr {
            series.expr_pred.push(pred.expr);
            series.expr_true.push(e);
        }
    }
    report.matched = seen;
    report.unmatched_predictions = preds.len() - seen;
    if report.matched == 0 {
        return Err(Error::EmptyJoin(
            "no frame ids shared between predictions and labels".into(),
        ));
    }
    Ok((series, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use synthetic::{aus_of, expression_of};

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = SyntheticSpec {
            n_samples: 12,
            seed: 77,
            partial_annotation_probs: (0.3, 0.3, 0.3),
            ..SyntheticSpec::default()
        };
        let a = gen_synthetic(&spec).unwrap();
        let b = gen_synthetic(&spec).unwrap();
        assert!(a
            .images
            .iter()
            .zip(&b.images)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels.va, b.labels.va);
        assert_eq!(a.labels.expr, b.labels.expr);
        assert_eq!(a.labels.mask_au, b.labels.mask_au);

        let c = gen_synthetic(&SyntheticSpec { seed: 78, ..spec }).unwrap();
        assert!(a.images != c.images);
    }

    #[test]
    fn latent_origin_is_neutral_with_exact_target() {
        use rand::SeedableRng;
        let spec = SyntheticSpec {
            label_noise: 0.0,
            ..SyntheticSpec::default()
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (_, va, _, expr, mask) = sample_from_latent(0.0, 0.0, &spec, &mut rng);
        assert_eq!(expr, 0);
        assert_eq!(va, [0.0, 0.0]);
        assert_eq!(mask, [true, true, true]);
    }

    #[test]
    fn expression_partition_covers_all_classes() {
        let spec = SyntheticSpec {
            n_samples: 500,
            seed: 3,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let mut seen = [false; 7];
        for &e in &data.labels.expr {
            seen[e] = true;
        }
        assert!(seen.iter().all(|&s| s), "classes seen: {seen:?}");
        // labels recompute exactly from the stored latents
        for (i, &(v, a)) in data.latents.iter().enumerate() {
            assert_eq!(data.labels.expr[i], expression_of(v, a));
            let aus = aus_of(v, a);
            for k in 0..8 {
                assert_eq!(data.labels.au[i * 8 + k] != 0.0, aus[k]);
            }
        }
    }

    #[test]
    fn decision_stump_recovers_every_au_exactly() {
        // brute-force the best single-axis threshold classifier per unit
        let spec = SyntheticSpec {
            n_samples: 200,
            seed: 11,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        for k in 0..8 {
            let truth: Vec<bool> = (0..data.len())
                .map(|i| data.labels.au[i * 8 + k] != 0.0)
                .collect();
            let mut best = 0.0f64;
            for axis in 0..2 {
                let coord: Vec<f64> = data
                    .latents
                    .iter()
                    .map(|&(v, a)| if axis == 0 { v } else { a })
                    .collect();
                let mut thresholds: Vec<f64> = coord.clone();
                thresholds.push(-1.0);
                thresholds.push(1.0);
                for &thr in &thresholds {
                    for sign in [true, false] {
                        let acc = coord
                            .iter()
                            .zip(&truth)
                            .filter(|(&c, &t)| ((c > thr) == sign) == t)
                            .count() as f64
                            / coord.len() as f64;
                        best = best.max(acc);
                    }
                }
            }
            assert_eq!(best, 1.0, "au{k} not linearly recoverable");
        }
    }

    #[test]
    fn nearest_centroid_on_pixels_beats_chance_on_expressions() {
        let spec = SyntheticSpec {
            n_samples: 210,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let stride = data.sample_stride();
        let train: Vec<usize> = (0..data.len()).filter(|i| i % 2 == 0).collect();
        let test: Vec<usize> = (0..data.len()).filter(|i| i % 2 == 1).collect();

        let mut centroids = vec![vec![0.0f64; stride]; 7];
        let mut counts = [0usize; 7];
        for &i in &train {
            let c = data.labels.expr[i];
            counts[c] += 1;
            for (p, &v) in centroids[c]
                .iter_mut()
                .zip(&data.images[i * stride..(i + 1) * stride])
            {
                *p += v as f64;
            }
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            if counts[c] > 0 {
                for p in centroid.iter_mut() {
                    *p /= counts[c] as f64;
                }
            }
        }
        let mut hits = 0usize;
        for &i in &test {
            let img = &data.images[i * stride..(i + 1) * stride];
            let mut best = (f64::INFINITY, 0usize);
            for (c, centroid) in centroids.iter().enumerate() {
                if counts[c] == 0 {
                    continue;
                }
                let d: f64 = img
                    .iter()
                    .zip(centroid)
                    .map(|(&x, &m)| (x as f64 - m).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            if best.1 == data.labels.expr[i] {
                hits += 1;
            }
        }
        let acc = hits as f64 / test.len() as f64;
        assert!(acc >= 0.25, "nearest-centroid accuracy {acc} not above chance");
    }

    #[test]
    fn batches_partition_the_dataset() {
        let spec = SyntheticSpec {
            n_samples: 10,
            seed: 2,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let batches = batch_iter(&data, 4, 123).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.rows.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);

        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.rows.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());

        // identical shuffle seed, identical order
        let again = batch_iter(&data, 4, 123).unwrap();
        for (x, y) in batches.iter().zip(&again) {
            assert_eq!(x.rows, y.rows);
        }
        assert!(batch_iter(&data, 1, 0).is_err());
    }

    #[test]
    fn short_tail_without_va_merges_into_previous_batch() {
        let spec = SyntheticSpec {
            n_samples: 9,
            seed: 4,
            ..SyntheticSpec::default()
        };
        let mut data = gen_synthetic(&spec).unwrap();
        // force VA absent everywhere except two samples
        for i in 0..9 {
            data.labels.mask_va[i] = i < 2;
            data.labels.mask_expr[i] = true;
        }
        let batches = batch_iter(&data, 4, 7).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.rows.len()).collect();
        // the one-sample tail cannot satisfy the two-with-va rule
        assert_eq!(sizes, vec![4, 5]);
    }

    #[test]
    fn csv_parses_full_and_sentinel_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        std::fs::write(
            &path,
            format!(
                "{CSV_HEADER}\nf1,0.5,-0.2,1,0,0,0,1,0,0,0,3\nf2,-,-,0,1,0,0,0,0,0,0,-\n"
            ),
        )
        .unwrap();
        let records = load_labels_csv(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].va, Some((0.5, -0.2)));
        assert_eq!(records[0].expr, Some(3));
        assert!(records[0].au.is_some());
        assert_eq!(records[1].va, None);
        assert_eq!(records[1].expr, None);
        assert_eq!(records[1].au.unwrap()[1], 1);
    }

    #[test]
    fn csv_rejects_bad_rows_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");

        let cases = [
            ("f1,1.5,0.0,0,0,0,0,0,0,0,0,1", "valence"),      // out of range
            ("f1,0.1,0.0,2,0,0,0,0,0,0,0,1", "au0"),          // non-binary
            ("f1,0.1,0.0,0,0,0,0,0,0,0,0,9", "expr"),         // class range
            ("f1,0.1,0.0,0,0,0,0,0,0,0,0", "12 fields"),      // missing column
            ("f1,-,0.3,0,0,0,0,0,0,0,0,1", "both"),           // half-absent va
        ];
        for (row, needle) in cases {
            std::fs::write(&path, format!("{CSV_HEADER}\n{row}\n")).unwrap();
            let err = load_labels_csv(&path).unwrap_err().to_string();
            assert!(err.contains(":2:"), "line number missing in '{err}'");
            assert!(err.contains(needle), "'{needle}' not in '{err}'");
        }

        // duplicate frame id, reported on the second occurrence
        std::fs::write(
            &path,
            format!("{CSV_HEADER}\nf1,0.1,0.0,0,0,0,0,0,0,0,0,1\nf1,0.2,0.0,0,0,0,0,0,0,0,0,1\n"),
        )
        .unwrap();
        let err = load_labels_csv(&path).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("duplicate"), "{err}");

        // wrong header
        std::fs::write(&path, "frame,valence\n").unwrap();
        assert!(load_labels_csv(&path).is_err());
    }

    #[test]
    fn canonical_csv_round_trips_byte_for_byte() {
        let spec = SyntheticSpec {
            n_samples: 20,
            seed: 6,
            partial_annotation_probs: (0.2, 0.2, 0.2),
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.export(dir.path()).unwrap();
        let original = std::fs::read(dir.path().join("labels.csv")).unwrap();

        let records = load_labels_csv(&dir.path().join("labels.csv")).unwrap();
        let rewritten_path = dir.path().join("rewritten.csv");
        write_labels_csv(&rewritten_path, &records).unwrap();
        let rewritten = std::fs::read(&rewritten_path).unwrap();
        assert_eq!(original, rewritten);
    }

    #[test]
    fn dataset_export_import_round_trip() {
        let spec = SyntheticSpec {
            n_samples: 8,
            seed: 14,
            ..SyntheticSpec::default()
        };
        let data = gen_synthetic(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.export(dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(loaded.len(), 8);
        assert_eq!(loaded.image_size, data.image_size);
        assert!(loaded
            .images
            .iter()
            .zip(&data.images)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(loaded.frame_ids, data.frame_ids);
    }

    fn pred(frame_id: &str) -> PredictionRecord {
        PredictionRecord {
            frame_id: frame_id.to_string(),
            valence: 0.1,
            arousal: 0.2,
            au_scores: [0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9, 0.1],
            expr: 3,
        }
    }

    #[test]
    fn join_computes_per_task_series_and_counts() {
        // 10 labeled frames: 2 lack VA, 1 lacks AU, 2 lack EXPR; predictions
        // miss one frame entirely and add one unknown frame.
        let mut labels = Vec::new();
        for i in 0..10 {
            labels.push(LabelRecord {
                frame_id: format!("f{i}"),
                va: (i >= 2).then_some((0.1, 0.2)),
                au: (i != 2).then_some([1, 0, 0, 0, 1, 0, 0, 0]),
                expr: (i < 8).then_some(2),
            });
        }
        let preds: Vec<PredictionRecord> = (1..11).map(|i| pred(&format!("f{i}"))).collect();

        let (series, report) = join_for_eval(&preds, &labels).unwrap();
        assert_eq!(report.matched, 9); // f0 unmatched on the label side
        assert_eq!(report.unmatched_labels, 1);
        assert_eq!(report.unmatched_predictions, 1); // f10 unknown
        // joined rows f1..f9: va present on f2..f9 = 8, au missing only f2 = 8,
        // expr present on f1..f7 = 7
        assert_eq!(series.valence_pred.len(), 8);
        assert_eq!(series.au_pred.len() / 8, 8);
        assert_eq!(series.expr_pred.len(), 7);

        let empty = join_for_eval(&[pred("zzz")], &labels);
        assert!(empty.is_err());
    }
}
