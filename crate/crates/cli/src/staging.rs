//! Output directories that only appear once a command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use emkd_core::EmkdError;

use crate::Result;

/// A temporary sibling of the final directory. Dropping it without
/// [`Staged::commit`] deletes everything written so far.
#[derive(Debug)]
pub struct Staged {
    target: PathBuf,
    dir: Option<tempfile::TempDir>,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| EmkdError::io(&parent, e))?;
        let name = target
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let dir = tempfile::Builder::new()
            .prefix(&format!(".{name}.partial-"))
            .tempdir_in(&parent)
            .map_err(|e| EmkdError::io(&parent, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            dir: Some(dir),
        })
    }

    pub fn path(&self) -> &Path {
        self.dir.as_ref().expect("staging directory").path()
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    /// Replaces the target directory with the staged contents.
    pub fn commit(mut self) -> Result<PathBuf> {
        let dir = self.dir.take().expect("staging directory").keep();
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| EmkdError::io(&self.target, e))?;
        }
        fs::rename(&dir, &self.target).map_err(|e| EmkdError::io(&self.target, e))?;
        Ok(self.target.clone())
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| EmkdError::io(&parent, e))?;
    tmp.write_all(bytes).map_err(|e| EmkdError::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(|e| EmkdError::io(path, e))?;
    }
    tmp.persist(path).map_err(|e| EmkdError::io(path, e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_output_vanishes() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        {
            let s = Staged::new(&target).unwrap();
            fs::write(s.file("a.txt"), "x").unwrap();
        }
        assert!(!target.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 0);

        let s = Staged::new(&target).unwrap();
        fs::write(s.file("a.txt"), "y").unwrap();
        s.commit().unwrap();
        assert_eq!(fs::read_to_string(target.join("a.txt")).unwrap(), "y");
    }
}
