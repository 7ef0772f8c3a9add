use std::time::Instant;

use super::train::pyramid_tensors;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fcn::{extract_levels, FcnModel, ScalePyramidConfig};
use crate::nbnl::{classify_nbnl, PrototypeBank};
use crate::numerics::NormMode;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][pred]` counts.
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
    pub descriptors: usize,
    /// Wall-clock extraction + scoring throughput; not deterministic.
    pub descriptors_per_second: f64,
}

impl EvalReport {
    /// One row per non-empty `(true, predicted)` cell.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::from("label_true,label_pred,count\n");
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if n > 0 {
                    out.push_str(&format!("{t},{p},{n}\n"));
                }
            }
        }
        out
    }
}

/// Classifies every image of `data` with the extractor in inference mode.
pub fn evaluate(
    model: &FcnModel,
    bank: &PrototypeBank,
    pyramid: &ScalePyramidConfig,
    data: &Dataset,
) -> Result<EvalReport> {
    let k = bank.classes();
    if data.labels().len() != k {
        return Err(Error::invalid(format!(
            "dataset has {} classes, prototype bank has {k}",
            data.labels().len()
        )));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    pyramid.validate(model.topology())?;
    let start = Instant::now();
    let mut confusion = vec![vec![0usize; k]; k];
    let mut predictions = Vec::with_capacity(data.len());
    let mut descriptors = 0;
    for (sample, levels) in data.items().iter().zip(pyramid_tensors(model, pyramid, data)?) {
        let (msd, _) = extract_levels(model, &levels, NormMode::Infer)?;
        descriptors += msd.total();
        let pred = classify_nbnl(&msd, bank)?;
        confusion[sample.label][pred] += 1;
        predictions.push(pred);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        per_class_accuracy,
        predictions,
        descriptors,
        descriptors_per_second: if elapsed > 0.0 {
            descriptors as f64 / elapsed
        } else {
            f64::INFINITY
        },
    })
}
