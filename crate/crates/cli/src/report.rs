//! CSV and text artifact writers. Output is byte-deterministic: floats use
//! Rust's shortest round-trip formatting and nothing time- or host-dependent
//! is written.

use std::path::Path;

use adaptconv_core::error::Result;
use adaptconv_core::train::EpochRow;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn train_log_csv(log: &[EpochRow], metric_name: &str) -> String {
    let mut s = format!("epoch,lr,train_loss,{metric_name}\n");
    for row in log {
        s.push_str(&format!(
            "{},{},{},{}\n",
            row.epoch, row.lr, row.train_loss, row.test_metric
        ));
    }
    s
}

pub fn classification_eval_csv(preds: &[usize], labels: &[usize]) -> String {
    let mut s = String::from("shape,label,prediction\n");
    for (i, (p, l)) in preds.iter().zip(labels).enumerate() {
        s.push_str(&format!("{i},{l},{p}\n"));
    }
    s
}

pub fn segmentation_eval_csv(categories: &[usize], shape_ious: &[f64]) -> String {
    let mut s = String::from("shape,category,shape_iou\n");
    for (i, (c, iou)) in categories.iter().zip(shape_ious).enumerate() {
        s.push_str(&format!("{i},{c},{iou}\n"));
    }
    s
}

pub fn robustness_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("level,overall_accuracy\n");
    for (level, oa) in curve {
        s.push_str(&format!("{level},{oa}\n"));
    }
    s
}

pub fn featmap_csv(positions: &[[f64; 3]], distances: &[f64]) -> String {
    let mut s = String::from("point,x,y,z,distance\n");
    for (i, (p, d)) in positions.iter().zip(distances).enumerate() {
        s.push_str(&format!("{i},{},{},{},{d}\n", p[0], p[1], p[2]));
    }
    s
}

pub struct AblationRow {
    pub method: String,
    pub seed: String,
    pub mciou: f64,
    pub miou: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("method,seed,mciou,miou\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.method, r.seed, r.mciou, r.miou));
    }
    s
}
