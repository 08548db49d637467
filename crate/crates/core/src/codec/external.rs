use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Codec, Coded};
use crate::data::{load_image, save_image};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// An external encoder/decoder pair driven through command templates.
///
/// Templates are split on whitespace into a program and its arguments; no
/// shell is involved. `{input}`, `{output}` and (encode only) `{qp}` are
/// substituted per argument.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSpec {
    pub name: String,
    pub encode_template: String,
    pub decode_template: String,
    pub qp_min: i32,
    pub qp_max: i32,
    /// Caller's assertion that the bitstream never grows with qp.
    #[serde(default = "yes")]
    pub qp_direction: bool,
    /// Image format the decoder writes: `png` or `ppm`.
    #[serde(default = "png")]
    pub decoded_format: String,
}

fn yes() -> bool {
    true
}

fn png() -> String {
    "png".into()
}

fn count(template: &str, placeholder: &str) -> usize {
    template.matches(placeholder).count()
}

impl CodecSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Codec(format!("codec spec {}: {m}", self.name)));
        for (which, template, needed, forbidden) in [
            ("encode", &self.encode_template, &["{input}", "{output}", "{qp}"][..], &[][..]),
            ("decode", &self.decode_template, &["{input}", "{output}"][..], &["{qp}"][..]),
        ] {
            if template.split_whitespace().next().is_none() {
                return bad(format!("{which} template is empty"));
            }
            for p in needed {
                let n = count(template, p);
                if n != 1 {
                    return bad(format!("{which} template must contain {p} exactly once, found {n}"));
                }
            }
            for p in forbidden {
                if count(template, p) != 0 {
                    return bad(format!("{which} template must not contain {p}"));
                }
            }
        }
        if self.qp_min > self.qp_max {
            return bad(format!("empty qp range {}..={}", self.qp_min, self.qp_max));
        }
        if !self.qp_direction {
            return bad("bit-rate targeting needs a codec whose size is non-increasing in qp".into());
        }
        if !matches!(self.decoded_format.as_str(), "png" | "ppm") {
            return bad(format!("decoded_format {:?} is not png or ppm", self.decoded_format));
        }
        Ok(())
    }

    fn command(template: &str, input: &Path, output: &Path, qp: Option<i32>) -> Vec<String> {
        template
            .split_whitespace()
            .map(|arg| {
                let mut arg = arg
                    .replace("{input}", &input.to_string_lossy())
                    .replace("{output}", &output.to_string_lossy());
                if let Some(qp) = qp {
                    arg = arg.replace("{qp}", &qp.to_string());
                }
                arg
            })
            .collect()
    }
}

fn unique_stem() -> String {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    format!(
        "codec-{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    )
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn execute(argv: &[String]) -> Result<()> {
    let output = Command::new(&argv[0])
        .args(&argv[1..])
        .output()
        .map_err(|e| Error::Codec(format!("cannot launch `{}`: {e}", argv.join(" "))))?;
    if !output.status.success() {
        return Err(Error::Codec(format!(
            "`{}` exited with {}\nstdout:\n{}\nstderr:\n{}",
            argv.join(" "),
            output.status,
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        )));
    }
    Ok(())
}

/// Encodes `input` at `qp`, decodes it again and reports the decoded image
/// with `8 × encoded file size` bits. Intermediate files live in `workdir`
/// under names unique to this call and are removed afterwards.
pub fn run_codec(input: &Path, qp: i32, spec: &CodecSpec, workdir: &Path) -> Result<(ImageBuffer, u64)> {
    spec.validate()?;
    if qp < spec.qp_min || qp > spec.qp_max {
        return Err(Error::Codec(format!(
            "{}: qp {qp} outside {}..={}",
            spec.name, spec.qp_min, spec.qp_max
        )));
    }
    let input = absolute(input)?;
    let workdir = absolute(workdir)?;
    let stem = unique_stem();
    let encoded = workdir.join(format!("{stem}.bin"));
    let decoded = workdir.join(format!("{stem}.{}", spec.decoded_format));

    let result = (|| {
        execute(&CodecSpec::command(&spec.encode_template, &input, &encoded, Some(qp)))?;
        let size = std::fs::metadata(&encoded)
            .map_err(|e| Error::Codec(format!("encoder produced no {}: {e}", encoded.display())))?
            .len();
        execute(&CodecSpec::command(&spec.decode_template, &encoded, &decoded, None))?;
        if !decoded.exists() {
            return Err(Error::Codec(format!("decoder produced no {}", decoded.display())));
        }
        Ok((load_image(&decoded)?, 8 * size))
    })();
    let _ = std::fs::remove_file(&encoded);
    let _ = std::fs::remove_file(&decoded);
    result
}

/// [`CodecSpec`] bound to a scratch directory, usable as an in-memory
/// [`Codec`].
#[derive(Clone, Debug)]
pub struct ExternalCodec {
    spec: CodecSpec,
    workdir: PathBuf,
}

impl ExternalCodec {
    pub fn new(spec: CodecSpec, workdir: impl Into<PathBuf>) -> Result<Self> {
        spec.validate()?;
        let workdir = workdir.into();
        std::fs::create_dir_all(&workdir).map_err(|e| Error::io(&workdir, e))?;
        Ok(Self { spec, workdir })
    }

    pub fn spec(&self) -> &CodecSpec {
        &self.spec
    }
}

impl Codec for ExternalCodec {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn qp_range(&self) -> (i32, i32) {
        (self.spec.qp_min, self.spec.qp_max)
    }

    fn code(&self, image: &ImageBuffer, qp: i32) -> Result<Coded> {
        let source = self.workdir.join(format!("{}.png", unique_stem()));
        save_image(image, &source)?;
        let result = run_codec(&source, qp, &self.spec, &self.workdir);
        let _ = std::fs::remove_file(&source);
        let (decoded, bits) = result?;
        if decoded.dims() != image.dims() {
            return Err(Error::Codec(format!(
                "{}: decoded {:?} from a {:?} input",
                self.spec.name,
                decoded.dims(),
                image.dims()
            )));
        }
        Ok(Coded { decoded, bits })
    }
}
