//! Versioned binary checkpoint for a trained translator state: magic
//! `FRTS`, format version, the network shape manifest, little-endian
//! 64-bit float parameter payloads, and the optimizer moments, so training
//! and inference resume bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use fresco_core::hsr::{HsrConfig, LossHistory, NetSpec, TranslatorState};
use fresco_core::nn::{flatten_params, param_count, restore_params, Adam, Layer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::CliError;

pub const MAGIC: &[u8; 4] = b"FRTS";
pub const FORMAT_VERSION: u16 = 1;

fn io_err(e: std::io::Error) -> CliError {
    CliError::usage(format!("checkpoint i/o failure: {e}"))
}

fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<(), CliError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<(), CliError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<(), CliError> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> Result<(), CliError> {
    write_u64(w, vs.len() as u64)?;
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

fn write_text<W: Write>(w: &mut W, text: &str) -> Result<(), CliError> {
    let bytes = text.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(bytes).map_err(io_err)
}

fn write_adam<W: Write>(w: &mut W, adam: &Adam) -> Result<(), CliError> {
    write_u64(w, adam.t)?;
    write_u64(w, adam.moments.len() as u64)?;
    for (m, v) in &adam.moments {
        write_f64s(w, m)?;
        write_f64s(w, v)?;
    }
    Ok(())
}

fn write_net<W: Write>(w: &mut W, net: &mut dyn Layer, adam: &Adam) -> Result<(), CliError> {
    write_text(w, &net.describe())?;
    write_f64s(w, &flatten_params(net))?;
    write_adam(w, adam)
}

pub fn save(path: &Path, state: &mut TranslatorState) -> Result<(), CliError> {
    let file = File::create(path)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    write_u16(&mut w, FORMAT_VERSION)?;

    let spec = state.spec.clone();
    write_u16(&mut w, spec.b_h as u16)?;
    write_u16(&mut w, spec.s as u16)?;
    write_u16(&mut w, spec.r as u16)?;
    write_u16(&mut w, spec.translator_widths.len() as u16)?;
    for width in &spec.translator_widths {
        write_u16(&mut w, *width as u16)?;
    }
    write_u16(&mut w, spec.inverse_width as u16)?;
    write_u16(&mut w, spec.discriminator_width as u16)?;

    write_f64(&mut w, state.opt_f.beta1)?;
    write_f64(&mut w, state.opt_f.beta2)?;
    write_u64(&mut w, state.iteration as u64)?;
    write_f64s(&mut w, &state.history.d_adv)?;
    write_f64s(&mut w, &state.history.f_adv)?;
    write_f64s(&mut w, &state.history.inverse)?;
    write_f64s(&mut w, &state.history.scale)?;

    // Borrow the optimizer alongside the network it owns.
    let opt_f = std::mem::replace(&mut state.opt_f, Adam::new(0.5, 0.999));
    write_net(&mut w, &mut state.f, &opt_f)?;
    state.opt_f = opt_f;
    let opt_g = std::mem::replace(&mut state.opt_g, Adam::new(0.5, 0.999));
    write_net(&mut w, &mut state.g, &opt_g)?;
    state.opt_g = opt_g;
    let opt_d = std::mem::replace(&mut state.opt_d, Adam::new(0.5, 0.999));
    write_net(&mut w, &mut state.d, &opt_d)?;
    state.opt_d = opt_d;

    w.flush().map_err(io_err)
}

struct Reader<R: Read> {
    inner: R,
    offset: u64,
    path: String,
}

impl<R: Read> Reader<R> {
    fn take(&mut self, buf: &mut [u8]) -> Result<(), CliError> {
        self.inner.read_exact(buf).map_err(|_| {
            CliError::usage(format!(
                "{}: truncated at byte offset {}",
                self.path, self.offset
            ))
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        let mut buf = [0u8; 2];
        self.take(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        let mut buf = [0u8; 8];
        self.take(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        let mut buf = [0u8; 8];
        self.take(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, CliError> {
        let n = self.u64()? as usize;
        if n > (1 << 32) {
            return Err(CliError::usage(format!(
                "{}: implausible vector length {n} at byte offset {}",
                self.path, self.offset
            )));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn text(&mut self) -> Result<String, CliError> {
        let mut buf = [0u8; 4];
        self.take(&mut buf)?;
        let n = u32::from_le_bytes(buf) as usize;
        let mut bytes = vec![0u8; n];
        self.take(&mut bytes)?;
        String::from_utf8(bytes)
            .map_err(|_| CliError::usage(format!("{}: manifest is not UTF-8", self.path)))
    }

    fn adam(&mut self, beta1: f64, beta2: f64) -> Result<Adam, CliError> {
        let mut adam = Adam::new(beta1, beta2);
        adam.t = self.u64()?;
        let buffers = self.u64()? as usize;
        for _ in 0..buffers {
            let m = self.f64s()?;
            let v = self.f64s()?;
            adam.moments.push((m, v));
        }
        Ok(adam)
    }
}

pub fn load(path: &Path) -> Result<TranslatorState, CliError> {
    let file = File::open(path)
        .map_err(|e| CliError::usage(format!("cannot open {}: {e}", path.display())))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        offset: 0,
        path: path.display().to_string(),
    };
    let mut magic = [0u8; 4];
    r.take(&mut magic)?;
    if &magic != MAGIC {
        return Err(CliError::usage(format!(
            "{}: bad magic {magic:02x?} at byte offset 0",
            path.display()
        )));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(CliError::usage(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let b_h = r.u16()? as usize;
    let s = r.u16()? as usize;
    let materials = r.u16()? as usize;
    let n_widths = r.u16()? as usize;
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r.u16()? as usize);
    }
    let inverse_width = r.u16()? as usize;
    let discriminator_width = r.u16()? as usize;
    let spec = NetSpec {
        b_h,
        s,
        r: materials,
        translator_widths: widths,
        inverse_width,
        discriminator_width,
    };
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let iteration = r.u64()? as usize;
    let history = LossHistory {
        d_adv: r.f64s()?,
        f_adv: r.f64s()?,
        inverse: r.f64s()?,
        scale: r.f64s()?,
    };

    let config = HsrConfig {
        beta1,
        beta2,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = TranslatorState::new(&spec, &config, &mut rng)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    state.iteration = iteration;
    state.history = history;

    for (net, opt) in [
        (&mut state.f as &mut dyn Layer, &mut state.opt_f),
        (&mut state.g as &mut dyn Layer, &mut state.opt_g),
        (&mut state.d as &mut dyn Layer, &mut state.opt_d),
    ] {
        let manifest = r.text()?;
        if manifest != net.describe() {
            return Err(CliError::usage(format!(
                "{}: layer manifest mismatch\n  file:  {manifest}\n  built: {}",
                path.display(),
                net.describe()
            )));
        }
        let params = r.f64s()?;
        if params.len() != param_count(net) {
            return Err(CliError::usage(format!(
                "{}: parameter payload has {} values, network needs {}",
                path.display(),
                params.len(),
                param_count(net)
            )));
        }
        restore_params(net, &params)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        *opt = r.adam(beta1, beta2)?;
    }
    Ok(state)
}
