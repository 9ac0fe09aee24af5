//! Output directories that appear all at once or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use crate::CliError;

/// A hidden sibling directory that is renamed onto the target on
/// [`Staging::commit`] and deleted if dropped uncommitted.
pub struct Staging {
    target: PathBuf,
    dir: PathBuf,
    committed: bool,
}

impl Staging {
    /// Fails when `target` exists and is not an empty directory.
    pub fn new(target: &Path) -> Result<Self, CliError> {
        if target.exists() {
            let empty = target.is_dir()
                && fs::read_dir(target)
                    .map_err(|e| getam::Error::Io { path: target.into(), source: e })?
                    .next()
                    .is_none();
            if !empty {
                return Err(CliError::Validation(format!(
                    "output {} already exists and is not empty",
                    target.display()
                )));
            }
        }
        let name = target
            .file_name()
            .ok_or_else(|| CliError::Validation(format!("invalid output path {}", target.display())))?;
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).map_err(|e| getam::Error::Io { path: parent.clone(), source: e })?;
        let dir = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
        if dir.exists() {
            let _ = fs::remove_dir_all(&dir);
        }
        fs::create_dir(&dir).map_err(|e| getam::Error::Io { path: dir.clone(), source: e })?;
        Ok(Self {
            target: target.to_path_buf(),
            dir,
            committed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn commit(mut self) -> Result<PathBuf, CliError> {
        if self.target.is_dir() {
            fs::remove_dir(&self.target).map_err(|e| getam::Error::Io { path: self.target.clone(), source: e })?;
        }
        fs::rename(&self.dir, &self.target).map_err(|e| getam::Error::Io { path: self.target.clone(), source: e })?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_moves_and_drop_cleans() {
        let root = tempfile::tempdir().unwrap();
        let target = root.path().join("run");
        let s = Staging::new(&target).unwrap();
        fs::write(s.path().join("a.txt"), "x").unwrap();
        s.commit().unwrap();
        assert!(target.join("a.txt").exists());

        let other = root.path().join("failed");
        {
            let s = Staging::new(&other).unwrap();
            fs::write(s.path().join("b.txt"), "x").unwrap();
        }
        assert!(!other.exists());
        assert_eq!(fs::read_dir(root.path()).unwrap().count(), 1);
    }

    #[test]
    fn refuses_nonempty_target_but_reuses_empty_one() {
        let root = tempfile::tempdir().unwrap();
        let full = root.path().join("full");
        fs::create_dir(&full).unwrap();
        fs::write(full.join("keep"), "x").unwrap();
        assert!(matches!(Staging::new(&full), Err(CliError::Validation(_))));

        let empty = root.path().join("empty");
        fs::create_dir(&empty).unwrap();
        let s = Staging::new(&empty).unwrap();
        fs::write(s.path().join("c"), "x").unwrap();
        s.commit().unwrap();
        assert!(empty.join("c").exists());
    }
}
