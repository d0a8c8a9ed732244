//! Resolving the `[data]` section into a dataset.

use std::path::Path;

use emkd_core::data::{
    ingest_attributes, ingest_ml1m, ingest_ml1m_movies, ingest_tsv, preprocess, synth_generate, Dataset,
};

use crate::settings::{DataSection, Format};
use crate::{CliError, Result};

/// Reads and filters a raw interaction file.
pub fn from_raw(format: Format, input: &Path, attributes: Option<&Path>) -> Result<Dataset> {
    let (raw, attrs) = match format {
        Format::Tsv => (
            ingest_tsv(input)?,
            attributes.map(ingest_attributes).transpose()?.unwrap_or_default(),
        ),
        Format::Ml1m => (
            ingest_ml1m(input)?,
            attributes.map(ingest_ml1m_movies).transpose()?.unwrap_or_default(),
        ),
        Format::Synth => return Err(CliError::Usage("synthetic data has no raw input".into())),
    };
    let mut data = preprocess(&raw, &attrs)?;
    data.source = Some(format.name().to_string());
    Ok(data)
}

fn looks_cached(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "json")
}

/// Synthetic corpus, a cached `.json` dataset, or a raw file.
pub fn load(section: &DataSection) -> Result<Dataset> {
    if section.format == Format::Synth {
        let mut data = synth_generate(&section.synth)?;
        data.source = Some("synth".into());
        return Ok(data);
    }
    let path = section
        .path
        .as_deref()
        .ok_or_else(|| CliError::Usage("no dataset given (use --dataset or --format synth)".into()))?;
    if looks_cached(path) {
        Ok(Dataset::load(path)?)
    } else {
        from_raw(section.format, path, section.attributes.as_deref())
    }
}

/// Default sequence length for a dataset whose format is recorded.
pub fn default_max_len(data: &Dataset, section: &DataSection) -> usize {
    match data.source.as_deref() {
        Some("ml1m") => Format::Ml1m.default_max_len(),
        Some(_) => Format::Tsv.default_max_len(),
        None => section.format.default_max_len(),
    }
}
