//! Qualitative export: one image grid per query with its prediction.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode_plan, EpisodeItem, EpisodeSpec, ImageStore, ImageTensor, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::eval::{episode_seed, EpisodeScorer};

const BORDER: u32 = 4;
const CORRECT: Rgb<u8> = Rgb([40, 170, 60]);
const WRONG: Rgb<u8> = Rgb([200, 40, 40]);
const NEUTRAL: Rgb<u8> = Rgb([255, 255, 255]);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Grid file relative to the export directory.
    pub file: String,
    pub correct: bool,
    pub episode: usize,
    pub query: String,
    pub true_class: String,
    pub predicted_class: String,
    /// Posterior probability of the predicted class.
    pub confidence: f64,
    /// Support images of the predicted class, shown in the first row.
    pub supports: Vec<String>,
}

fn paste(canvas: &mut RgbImage, img: &ImageTensor, store: &ImageStore, col: u32, row: u32, frame: Rgb<u8>) {
    let tile = IMAGE_SIZE as u32 + 2 * BORDER;
    let (x0, y0) = (col * tile, row * tile);
    for y in 0..tile {
        for x in 0..tile {
            canvas.put_pixel(x0 + x, y0 + y, frame);
        }
    }
    let norm = store.normalization();
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let px: [u8; 3] = std::array::from_fn(|c| norm.to_byte(c, img.data()[c * plane + y * IMAGE_SIZE + x]));
            canvas.put_pixel(x0 + BORDER + x as u32, y0 + BORDER + y as u32, Rgb(px));
        }
    }
}

/// Scores `episodes` episodes and writes up to `max_per_kind` correct and
/// `max_per_kind` incorrect cases. Each grid holds the query (framed green or
/// red) followed by the supports of the predicted class; an incorrect case adds
/// a second row with the supports of the true class. Metadata goes to
/// `samples.jsonl`.
#[allow(clippy::too_many_arguments)]
pub fn export_samples(
    scorer: &dyn EpisodeScorer,
    store: &ImageStore,
    split: &BTreeSet<String>,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    max_per_kind: usize,
    out_dir: &Path,
) -> Result<Vec<SampleRecord>> {
    for sub in ["correct", "incorrect"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let index = store.index();
    let mut records = Vec::new();
    let (mut n_ok, mut n_bad) = (0usize, 0usize);
    for e in 0..episodes {
        if n_ok >= max_per_kind && n_bad >= max_per_kind {
            break;
        }
        let plan = sample_episode_plan(index, split, spec, episode_seed(seed, e))?;
        let scored = scorer.score(&plan)?;
        let n = spec.n_way;
        let supports_of =
            |label: usize| -> Vec<&EpisodeItem> { plan.support.iter().filter(|s| s.label == label).collect() };
        for (qi, q) in plan.query.iter().enumerate() {
            let pred = scored.predictions[qi];
            let correct = pred == q.label;
            let count = if correct { &mut n_ok } else { &mut n_bad };
            if *count >= max_per_kind {
                continue;
            }
            *count += 1;
            let kind = if correct { "correct" } else { "incorrect" };
            let file = format!("{kind}/case_{:03}.png", *count - 1);

            let tile = IMAGE_SIZE as u32 + 2 * BORDER;
            let rows = if correct { 1 } else { 2 };
            let mut canvas = RgbImage::from_pixel(tile * (spec.k_shot as u32 + 1), tile * rows, NEUTRAL);
            paste(&mut canvas, &*store.get(q.item)?, store, 0, 0, if correct { CORRECT } else { WRONG });
            let pred_support = supports_of(pred);
            for (j, s) in pred_support.iter().enumerate() {
                paste(&mut canvas, &*store.get(s.item)?, store, j as u32 + 1, 0, NEUTRAL);
            }
            if !correct {
                for (j, s) in supports_of(q.label).iter().enumerate() {
                    paste(&mut canvas, &*store.get(s.item)?, store, j as u32 + 1, 1, CORRECT);
                }
            }
            let path = out_dir.join(&file);
            canvas.save(&path).map_err(|err| Error::Image { path: path.clone(), reason: err.to_string() })?;
            records.push(SampleRecord {
                file,
                correct,
                episode: e,
                query: index.path(q.item).display().to_string(),
                true_class: plan.class_ids[q.label].clone(),
                predicted_class: plan.class_ids[pred].clone(),
                confidence: scored.probs.data()[qi * n + pred],
                supports: pred_support.iter().map(|s| index.path(s.item).display().to_string()).collect(),
            });
        }
    }
    let meta = out_dir.join("samples.jsonl");
    let mut f = fs::File::create(&meta).map_err(|e| Error::io(format!("creating {}", meta.display()), e))?;
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r).expect("record serialises"))
            .map_err(|e| Error::io(format!("writing {}", meta.display()), e))?;
    }
    Ok(records)
}
