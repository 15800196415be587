//! Checkpoint directories: one `TNSR` file per parameter, a text index and
//! the model configuration.
//!
//! ```text
//! ckpt/
//!   index.txt    adsd-checkpoint 1 / param <name> <kind> <file> lines
//!   model.txt    model.* keys
//!   params/<name>.tnsr
//! ```

use std::fs;
use std::path::Path;

use crate::data::{read_tensor, write_tensor, StoredTensor};
use crate::error::{config_err, Error, Result};
use crate::harness::config::{model_from_text, model_to_text};
use crate::model::ModelConfig;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::Element;

const INDEX_HEADER: &str = "adsd-checkpoint 1";

pub fn save<T: Element>(dir: &Path, model: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    let params = dir.join("params");
    fs::create_dir_all(&params).map_err(|e| Error::io(&params, e))?;
    let mut index = format!("{INDEX_HEADER}\n");
    for (_, p) in store.iter() {
        let file = format!("params/{}.tnsr", p.name);
        write_tensor(&dir.join(&file), &StoredTensor::from(&p.value))?;
        index.push_str(&format!("param {} {} {file}\n", p.name, p.kind.as_str()));
    }
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("index.txt", &index)?;
    write("model.txt", &model_to_text(model))
}

pub fn load_model_config(dir: &Path) -> Result<ModelConfig> {
    let path = dir.join("model.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    model_from_text(&text)
}

/// Every parameter stored in a checkpoint.
pub fn load_store<T: Element>(dir: &Path) -> Result<ParamStore<T>> {
    let path = dir.join("index.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(Error::Format {
            field: "checkpoint index",
            detail: format!("{} does not start with `{INDEX_HEADER}`", path.display()),
        });
    }
    let mut store = ParamStore::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let (name, kind, file) = match f.as_slice() {
            ["param", name, kind, file] => (*name, *kind, *file),
            _ => {
                return Err(Error::Format {
                    field: "checkpoint index",
                    detail: format!("bad record `{line}`"),
                })
            }
        };
        let kind = ParamKind::parse(kind).ok_or_else(|| Error::Format {
            field: "checkpoint index",
            detail: format!("unknown parameter kind `{kind}`"),
        })?;
        let value = read_tensor(&dir.join(file))?.into_float::<f32>()?.cast::<T>();
        store.insert(name.to_string(), kind, value);
    }
    Ok(store)
}

/// Copies checkpoint values into `target`, requiring every parameter of
/// `target` whose name starts with one of `prefixes` to be present with the
/// same shape. The first missing or mismatched parameter is named.
pub fn restore_into<T: Element>(target: &mut ParamStore<T>, saved: &ParamStore<T>, prefixes: &[&str]) -> Result<()> {
    let names: Vec<String> = target
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(_, p)| p.name.clone())
        .collect();
    for name in names {
        let src = saved
            .by_name(&name)
            .ok_or_else(|| config_err!("checkpoint has no parameter `{name}`"))?;
        let dst = target.by_name(&name).expect("listed above");
        if src.value.shape() != dst.value.shape() {
            return Err(config_err!(
                "parameter `{name}`: checkpoint shape {:?}, model expects {:?}",
                src.value.shape(),
                dst.value.shape()
            ));
        }
        target.assign(&name, src.value.clone())?;
    }
    Ok(())
}
