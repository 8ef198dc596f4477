use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// The `[Sequence]` block of a MOTChallenge `seqinfo.ini`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqInfo {
    pub name: String,
    pub im_dir: String,
    pub frame_rate: usize,
    pub seq_length: usize,
    pub im_width: usize,
    pub im_height: usize,
    pub im_ext: String,
}

impl SeqInfo {
    pub fn to_ini(&self) -> String {
        format!(
            "[Sequence]\nname={}\nimDir={}\nframeRate={}\nseqLength={}\nimWidth={}\nimHeight={}\nimExt={}\n",
            self.name, self.im_dir, self.frame_rate, self.seq_length, self.im_width, self.im_height, self.im_ext
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut get = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty()
                || line.starts_with('[')
                || line.starts_with(';')
                || line.starts_with('#')
            {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, found {line:?}"),
            })?;
            get.insert(k.trim().to_string(), v.trim().to_string());
        }
        let field = |k: &str| {
            get.get(k).cloned().ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("seqinfo is missing {k}"),
            })
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?.parse().map_err(|_| Error::Parse {
                line: 0,
                message: format!("seqinfo {k} is not a count"),
            })
        };
        Ok(Self {
            name: field("name")?,
            im_dir: field("imDir")?,
            frame_rate: num("frameRate")?,
            seq_length: num("seqLength")?,
            im_width: num("imWidth")?,
            im_height: num("imHeight")?,
            im_ext: field("imExt")?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ini()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let s = SeqInfo {
            name: "MOT17-02".into(),
            im_dir: "img1".into(),
            frame_rate: 30,
            seq_length: 600,
            im_width: 1920,
            im_height: 1080,
            im_ext: ".jpg".into(),
        };
        assert_eq!(SeqInfo::parse(&s.to_ini()).unwrap(), s);
    }
}
