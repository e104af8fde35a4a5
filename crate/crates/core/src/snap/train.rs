use std::path::Path;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{adam_step, loss, AdamState, SnapHyper, SnapModel};
use crate::data::{PanelDataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainingLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

const SHUFFLE_KEY: u64 = 0x5348;
const DROPOUT_KEY: u64 = 0x4452;

/// Train on the training split with month mini-batches and early stopping on
/// validation loss. Returns the best-validation parameters.
pub fn train(data: &PanelDataset, hyper: &SnapHyper, masked: bool) -> Result<(SnapModel, TrainingLog)> {
    let mut model = SnapModel::for_dataset(data, hyper.clone(), masked)?;
    let train_months = data.months_in(Split::Train);
    let val_rows = data.rows_in(Split::Validate);
    if train_months.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if val_rows.is_empty() {
        return Err(Error::Input("validation split is empty".into()));
    }

    let adam = hyper.adam();
    let mut state = AdamState::new(model.num_params());
    let mut params = model.flatten();
    let dropout_seed = derive_seed(hyper.seed, &[DROPOUT_KEY]);
    let mut log = TrainingLog {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut stale = 0;

    for epoch in 1..=hyper.max_epochs {
        let mut order = train_months.clone();
        Rng::new(derive_seed(hyper.seed, &[SHUFFLE_KEY, epoch as u64])).shuffle(&mut order);
        let mut batch_losses = Vec::new();
        for months in order.chunks(hyper.batch_months) {
            let rows: Vec<usize> = months.iter().flat_map(|&m| data.month_rows(m)).collect();
            let (l, grad) = model.loss_and_grad(data, &rows, Some((dropout_seed, epoch as u64)))?;
            let mut g = grad.flatten();
            adam_step(&mut params, &mut g, &mut state, &adam)?;
            model.assign(&params)?;
            batch_losses.push(l);
        }
        let train_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_loss = loss(&model, data, &val_rows)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: hyper.learning_rate,
            seed: hyper.seed,
        });
        debug!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale > hyper.patience {
                info!("early stop at epoch {epoch}, best epoch {}", log.best_epoch);
                break;
            }
        }
    }
    model.assign(&best)?;
    Ok((model, log))
}
