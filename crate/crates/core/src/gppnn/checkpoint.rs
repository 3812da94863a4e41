use std::fs;
use std::path::Path;

use super::{GppnnWeights, NetworkConfig};
use crate::error::Result;
use crate::tensor::{read_ten, write_ten, Scalar};

pub const CONFIG_FILE: &str = "config.json";

/// Writes `config.json` and one `<name>.ten` per weight into `dir`.
pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, w: &GppnnWeights<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&w.config)?)?;
    for (name, t) in w.layout.names.iter().zip(&w.tensors) {
        write_ten(dir.join(format!("{name}.ten")), t)?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<GppnnWeights<f32>> {
    let dir = dir.as_ref();
    let cfg: NetworkConfig = serde_json::from_str(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut w = GppnnWeights::zeros(&cfg)?;
    for i in 0..w.layout.len() {
        let name = w.layout.names[i].clone();
        w.set(&name, read_ten(dir.join(format!("{name}.ten")))?)?;
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gppnn::Ablation;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for a in [Ablation::None, Ablation::TransposedKernels, Ablation::FusedBlock] {
            let cfg = NetworkConfig::new(2, 5, 4, 3).unwrap().with_ablation(a).with_seed(3);
            let w = GppnnWeights::<f32>::init(&cfg).unwrap();
            let path = dir.path().join(a.name());
            save_checkpoint(&path, &w).unwrap();
            assert_eq!(load_checkpoint(&path).unwrap(), w);
        }
    }

    #[test]
    fn missing_tensor_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let w = GppnnWeights::<f32>::init(&NetworkConfig::new(1, 4, 4, 4).unwrap()).unwrap();
        save_checkpoint(dir.path(), &w).unwrap();
        fs::remove_file(dir.path().join("layer0.pan.rho.ten")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
