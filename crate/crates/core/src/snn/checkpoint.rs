//! Parameter checkpoints.
//!
//! A checkpoint is a single JSON document holding the schema tag, shapes,
//! seed provenance and the three weight matrices together with their
//! creation snapshots. JSON carries `f64` values with shortest-roundtrip
//! formatting, so a load reproduces the saved weights bit-exactly; the
//! round-trip test below pins that.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SnnParams;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const SCHEMA: &str = "sntk-params-v1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    width: usize,
    dim: usize,
    /// `(master_seed, stream_id)` of the initializing stream.
    seed_provenance: (u64, u64),
    w_mu: Matrix,
    w_sigma: Matrix,
    w_d: Matrix,
    init_w_mu: Matrix,
    init_w_sigma: Matrix,
    init_w_d: Matrix,
}

pub fn save(params: &SnnParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        schema: SCHEMA.to_string(),
        width: params.width(),
        dim: params.dim(),
        seed_provenance: params.seed_provenance(),
        w_mu: params.w_mu().clone(),
        w_sigma: params.w_sigma().clone(),
        w_d: params.w_d().clone(),
        init_w_mu: params.init_w_mu().clone(),
        init_w_sigma: params.init_w_sigma().clone(),
        init_w_d: params.init_w_d().clone(),
    };
    let body = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<SnnParams> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let file: CheckpointFile =
        serde_json::from_str(&body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if file.schema != SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unknown schema {:?}, expected {SCHEMA:?}",
            file.schema
        )));
    }
    let shapes_ok = [&file.w_mu, &file.w_sigma, &file.w_d, &file.init_w_mu, &file.init_w_sigma, &file.init_w_d]
        .iter()
        .all(|m| m.rows() == file.width && m.cols() == file.dim);
    if !shapes_ok {
        return Err(Error::Checkpoint(
            "matrix shapes disagree with declared width/dim".into(),
        ));
    }
    Ok(SnnParams::from_parts(
        file.w_mu,
        file.w_sigma,
        file.w_d,
        file.init_w_mu,
        file.init_w_sigma,
        file.init_w_d,
        file.seed_provenance,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::snn::{init_params, ActivationKind, SnnConfig, WeightGroup};
    use crate::numerics::RngStream;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = SnnConfig {
            d: 3,
            m: 8,
            sigma0: 0.25,
            activation: ActivationKind::Tanh,
            decoder_rep: ActivationKind::Tanh,
            mc_samples: 4,
            antithetic: true,
        };
        let mut params = init_params(&cfg, &RngStream::new(123, 45));
        // move one group away from the snapshot so both states are exercised
        params.group_mut(WeightGroup::Mu).set(0, 0, 0.123456789e-7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        save(&params, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.w_mu(), params.w_mu());
        assert_eq!(loaded.w_sigma(), params.w_sigma());
        assert_eq!(loaded.w_d(), params.w_d());
        assert_eq!(loaded.init_w_mu(), params.init_w_mu());
        assert_eq!(loaded.seed_provenance(), params.seed_provenance());
    }

    #[test]
    fn rejects_unknown_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, r#"{"schema":"other","width":1,"dim":1}"#).unwrap();
        assert!(load(&path).is_err());
    }
}
