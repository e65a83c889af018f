//! `key = value` text files. `#` starts a comment line; keys are unique.
//! Every file starts with `format = 1`; readers reject unknown keys.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use vesselnet_core::models::{FebFilters, Model2DSpec, Model3DSpec, ModelSpec, StageSpec};

use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Parsed entries, consumed key by key.
#[derive(Debug, Default)]
pub struct Kv {
    entries: BTreeMap<String, String>,
}

impl Kv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key {k}", n + 1)));
            }
        }
        let mut kv = Kv { entries };
        if let Some(v) = kv.take::<u32>("format")? {
            if v != FORMAT_VERSION {
                return Err(Error::config(format!("format version {v}, expected {FORMAT_VERSION}")));
            }
        }
        Ok(kv)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}"))),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn take_dims<const N: usize>(&mut self, key: &str, slot: &mut [usize; N]) -> Result<()> {
        if let Some(v) = self.take::<String>(key)? {
            *slot = parse_dims(&v).map_err(|e| Error::config(format!("{key}: {e}")))?;
        }
        Ok(())
    }

    /// Fails on any key nobody asked for.
    pub fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::config(format!("unknown key {k}"))),
        }
    }
}

/// `AxBxC` into `[A, B, C]`.
pub fn parse_dims<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad extent {p:?} in {s:?}")))
        .collect::<std::result::Result<_, _>>()?;
    let dims: [usize; N] = parts.try_into().map_err(|_| format!("{s:?} needs {N} extents"))?;
    if dims.contains(&0) {
        return Err(format!("{s:?} has a zero extent"));
    }
    Ok(dims)
}

/// `AxBx..` with any number of extents.
pub fn parse_dims_any(s: &str) -> std::result::Result<Vec<usize>, String> {
    s.split('x')
        .map(|p| p.parse::<usize>().map_err(|_| format!("bad extent {p:?} in {s:?}")))
        .collect()
}

pub fn format_dims(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn filters_name(f: FebFilters) -> &'static str {
    match f {
        FebFilters::Constant => "constant",
        FebFilters::Indexed => "indexed",
    }
}

/// Key/value lines for a model spec, without the `format` line.
pub fn spec_lines(spec: &ModelSpec) -> String {
    let mut s = String::new();
    match spec {
        ModelSpec::Volume(v) => {
            let stages: Vec<String> = v
                .stages
                .iter()
                .map(|s| format!("{}:{}:{}:{}:{}", s.expansion, s.channels, s.repeats, s.kernel, s.stride))
                .collect();
            let _ = writeln!(s, "model = volume");
            let _ = writeln!(s, "stem_channels = {}", v.stem_channels);
            let _ = writeln!(s, "stem_kernel = {}", v.stem_kernel);
            let _ = writeln!(s, "stem_stride = {}", v.stem_stride);
            let _ = writeln!(s, "# expansion:channels:repeats:kernel:stride");
            let _ = writeln!(s, "stages = {}", stages.join(","));
            let _ = writeln!(s, "head_channels = {}", v.head_channels);
            let _ = writeln!(s, "input_dims = {}", format_dims(&v.input_dims));
            let _ = writeln!(s, "classes = {}", v.classes);
            let _ = writeln!(s, "survival_p = {}", v.survival_p);
        }
        ModelSpec::Views(v) => {
            let _ = writeln!(s, "model = views");
            let _ = writeln!(s, "m = {}", v.m);
            let _ = writeln!(s, "n = {}", v.n);
            let _ = writeln!(s, "p = {}", v.p);
            let _ = writeln!(s, "feb_shared = {}", v.feb_shared);
            let _ = writeln!(s, "filters = {}", filters_name(v.filters));
            let _ = writeln!(s, "dropout_rate = {}", v.dropout_rate);
            let _ = writeln!(s, "classes = {}", v.classes);
            let _ = writeln!(s, "input = {}", format_dims(&v.input));
        }
    }
    s
}

pub fn spec_to_text(spec: &ModelSpec) -> String {
    format!("format = {FORMAT_VERSION}\n{}", spec_lines(spec))
}

fn parse_stages(s: &str) -> Result<Vec<StageSpec>> {
    s.split(',')
        .map(|row| {
            let v: Vec<usize> = row
                .split(':')
                .map(|x| x.trim().parse().map_err(|_| Error::config(format!("stages: bad entry {row:?}"))))
                .collect::<Result<_>>()?;
            match v[..] {
                [expansion, channels, repeats, kernel, stride] => Ok(StageSpec {
                    expansion,
                    channels,
                    repeats,
                    kernel,
                    stride,
                }),
                _ => Err(Error::config(format!("stages: {row:?} needs five fields"))),
            }
        })
        .collect()
}

/// Takes the model keys, starting from `base` for anything absent. A
/// `model` key switches the kind, and then starts from that kind's defaults.
pub fn take_spec(kv: &mut Kv, base: ModelSpec) -> Result<ModelSpec> {
    let base = match kv.take::<String>("model")?.as_deref() {
        None => base,
        Some("volume") => match base {
            ModelSpec::Volume(_) => base,
            _ => ModelSpec::Volume(Model3DSpec::b0()),
        },
        Some("views") => match base {
            ModelSpec::Views(_) => base,
            _ => ModelSpec::Views(Model2DSpec::tuned()),
        },
        Some(other) => return Err(Error::config(format!("model: unknown kind {other:?}"))),
    };
    let spec = match base {
        ModelSpec::Volume(mut v) => {
            kv.take_into("stem_channels", &mut v.stem_channels)?;
            kv.take_into("stem_kernel", &mut v.stem_kernel)?;
            kv.take_into("stem_stride", &mut v.stem_stride)?;
            if let Some(s) = kv.take::<String>("stages")? {
                v.stages = parse_stages(&s)?;
            }
            kv.take_into("head_channels", &mut v.head_channels)?;
            kv.take_dims("input_dims", &mut v.input_dims)?;
            kv.take_into("classes", &mut v.classes)?;
            kv.take_into("survival_p", &mut v.survival_p)?;
            ModelSpec::Volume(v)
        }
        ModelSpec::Views(mut v) => {
            kv.take_into("m", &mut v.m)?;
            kv.take_into("n", &mut v.n)?;
            kv.take_into("p", &mut v.p)?;
            kv.take_into("feb_shared", &mut v.feb_shared)?;
            match kv.take::<String>("filters")?.as_deref() {
                None => {}
                Some("constant") => v.filters = FebFilters::Constant,
                Some("indexed") => v.filters = FebFilters::Indexed,
                Some(o) => return Err(Error::config(format!("filters: unknown mode {o:?}"))),
            }
            kv.take_into("dropout_rate", &mut v.dropout_rate)?;
            kv.take_into("classes", &mut v.classes)?;
            kv.take_dims("input", &mut v.input)?;
            ModelSpec::Views(v)
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn spec_from_text(text: &str) -> Result<ModelSpec> {
    let mut kv = Kv::parse(text)?;
    let spec = take_spec(&mut kv, ModelSpec::Views(Model2DSpec::tuned()))?;
    kv.finish()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_round_trip() {
        let mut v2 = Model2DSpec::new(2, 3, 4).with_input(20, 40);
        v2.filters = FebFilters::Indexed;
        v2.feb_shared = false;
        for spec in [
            ModelSpec::Volume(Model3DSpec::b0()),
            ModelSpec::Volume(Model3DSpec::reduced()),
            ModelSpec::Views(v2),
        ] {
            assert_eq!(spec_from_text(&spec_to_text(&spec)).unwrap(), spec);
        }
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(spec_from_text("format = 1\nmodel = views\nwidth = 3\n").is_err());
        assert!(spec_from_text("m = 1\nm = 2\n").is_err());
        assert!(spec_from_text("format = 2\n").is_err());
        assert!(spec_from_text("m = 0\n").is_err());
        assert!(spec_from_text("m 1\n").is_err());
    }

    #[test]
    fn dims() {
        assert_eq!(parse_dims::<3>("128x64x128").unwrap(), [128, 64, 128]);
        assert!(parse_dims::<2>("1x2x3").is_err());
        assert!(parse_dims::<2>("0x2").is_err());
        assert_eq!(format_dims(&[200, 400]), "200x400");
    }
}
