use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gf4d::sequence::MultiviewSequence;
use gf4d::Error;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const LOCK: &str = ".gf4d.lock";
pub const MANIFEST: &str = "manifest.txt";
pub const SEQUENCE_INFO: &str = "sequence.txt";
pub const SUBDIRS: [&str; 6] = ["inputs", "regenerated", "checkpoints", "renders", "features", "logs"];

/// `root/{inputs,regenerated,checkpoints,renders,features,logs}`.
pub struct Workspace {
    pub root: PathBuf,
}

/// Removes the lock file when dropped.
pub struct Lock(PathBuf);

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| {
        CliError::Lib(Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

impl Workspace {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.gf4d"))
    }

    pub fn create_dirs(&self) -> Result<(), CliError> {
        for d in SUBDIRS {
            let p = self.dir(d);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(())
    }

    /// One command per workspace at a time.
    pub fn lock(&self) -> Result<Lock, CliError> {
        fs::create_dir_all(&self.root).map_err(io(&self.root))?;
        let p = self.root.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&p) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(p))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "workspace {} is in use (remove {} if no command is running)",
                self.root.display(),
                p.display()
            ))),
            Err(e) => Err(io(&p)(e)),
        }
    }

    /// Reads the sequence stored under `name` (`inputs` or `regenerated`).
    pub fn read_sequence(&self, name: &str) -> Result<MultiviewSequence, CliError> {
        let dir = self.dir(name);
        let info = dir.join(SEQUENCE_INFO);
        if !info.exists() {
            return Err(Error::MissingInputs(vec![info.display().to_string()]).into());
        }
        let text = fs::read_to_string(&info).map_err(io(&info))?;
        let frames = text
            .lines()
            .find_map(|l| l.trim().strip_prefix("frames="))
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Format(format!("{}: expected frames=N", info.display())))?;
        Ok(MultiviewSequence::read_dir(&dir, frames)?)
    }

    pub fn write_sequence(&self, name: &str, seq: &MultiviewSequence) -> Result<(), CliError> {
        let dir = self.dir(name);
        seq.write_dir(&dir)?;
        gf4d::io::atomic_write(&dir.join(SEQUENCE_INFO), format!("frames={}\n", seq.frames).as_bytes())?;
        Ok(())
    }

    /// `sha256  path` for every file under `inputs/` and `regenerated/`,
    /// sorted by path.
    pub fn write_manifest(&self) -> Result<(), CliError> {
        let mut files = Vec::new();
        for d in ["inputs", "regenerated"] {
            collect(&self.root, &self.dir(d), &mut files)?;
        }
        files.sort();
        let mut text = String::new();
        for rel in files {
            let p = self.root.join(&rel);
            let bytes = fs::read(&p).map_err(io(&p))?;
            let digest = Sha256::digest(&bytes);
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            text.push_str(&format!("{hex}  {}\n", rel.replace('\\', "/")));
        }
        gf4d::io::atomic_write(&self.root.join(MANIFEST), text.as_bytes())?;
        Ok(())
    }

    pub fn append_log(&self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.dir("logs").join(name);
        fs::create_dir_all(self.dir("logs")).map_err(io(&p))?;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&p).map_err(io(&p))?;
        f.write_all(text.as_bytes()).map_err(io(&p))?;
        Ok(())
    }
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), CliError> {
    if !dir.exists() {
        return Ok(());
    }
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if !path.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')) {
            out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
        }
    }
    Ok(())
}
