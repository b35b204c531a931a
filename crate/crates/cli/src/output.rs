use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use crate::CliError;

/// Output directory plus the comment header every file starts with.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    header: Vec<String>,
    written: std::cell::RefCell<Vec<PathBuf>>,
}

impl Output {
    pub fn new(dir: PathBuf, command: &str, config_hash: &str, master_seed: u64) -> Self {
        Self {
            dir,
            header: vec![
                format!("corrnoise {}", env!("CARGO_PKG_VERSION")),
                format!("command={command}"),
                format!("config_hash={config_hash}"),
                format!("master_seed={master_seed}"),
            ],
            written: Default::default(),
        }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(name);
        let file = File::create(&path)
            .map_err(|e| CliError::config(format!("cannot create {}: {e}", path.display())))?;
        self.written.borrow_mut().push(path);
        Ok(BufWriter::new(file))
    }

    /// Print the files written so far, one per line.
    pub fn print_manifest(&self) {
        for p in self.written.borrow().iter() {
            println!("wrote {}", p.display());
        }
    }
}
