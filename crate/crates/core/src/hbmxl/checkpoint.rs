//! Binary chain checkpoint: magic, JSON header length (u64 LE), JSON header,
//! then little-endian `f64` arrays in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ChainRunner, EstimationData, HyperPriors, McmcSettings, Respondent};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EQSMCMC1";

#[derive(Serialize, Deserialize)]
struct Header {
    data_digest: String,
    priors: HyperPriors,
    settings: McmcSettings,
    seed: u64,
    t: usize,
    step: f64,
    window_accepts: u64,
    kept_accepts: u64,
    kept_proposals: u64,
    n_respondents: usize,
    n_params: usize,
    beta_iterations: Vec<usize>,
    /// Lengths of the arrays that follow: betas, log-likelihoods, beta-bar,
    /// Sigma, stored beta draws, beta-bar draws, Sigma draws.
    lengths: [usize; 7],
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

impl ChainRunner {
    pub fn save(&self, path: &Path) -> Result<()> {
        let betas: Vec<f64> = self.resp.iter().flat_map(|r| r.beta.iter().copied()).collect();
        let lls: Vec<f64> = self.resp.iter().map(|r| r.ll).collect();
        let arrays: [&[f64]; 7] = [
            &betas,
            &lls,
            self.betabar.as_slice(),
            self.sigma.as_slice(),
            &self.beta_draws,
            &self.betabar_draws,
            &self.sigma_draws,
        ];
        let header = Header {
            data_digest: self.data.digest(),
            priors: self.priors.clone(),
            settings: self.settings.clone(),
            seed: self.seed,
            t: self.t,
            step: self.step,
            window_accepts: self.window_accepts,
            kept_accepts: self.kept_accepts,
            kept_proposals: self.kept_proposals,
            n_respondents: self.data.n_respondents,
            n_params: self.data.n_params,
            beta_iterations: self.beta_iterations.clone(),
            lengths: arrays.map(|a| a.len()),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        let io = |e| Error::io(path, e);
        {
            let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
            w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
            w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
            w.write_all(&json).map_err(io)?;
            for a in arrays {
                write_f64s(&mut w, a).map_err(io)?;
            }
            w.flush().map_err(io)?;
        }
        std::fs::rename(&tmp, path).map_err(io)
    }

    /// Restores a runner; `data` and `priors` must match the saved run.
    pub fn from_checkpoint(path: &Path, data: EstimationData, priors: HyperPriors) -> Result<Self> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointMismatch(format!("{} is not a chain checkpoint", path.display())));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(io)?;
        let h: Header = serde_json::from_slice(&json)?;
        if h.data_digest != data.digest() {
            return Err(Error::CheckpointMismatch("choice data differ from the checkpointed run".into()));
        }
        if h.priors != priors {
            return Err(Error::CheckpointMismatch("hyperpriors differ from the checkpointed run".into()));
        }
        let mut arrays = Vec::with_capacity(7);
        for n in h.lengths {
            arrays.push(read_f64s(&mut r, n).map_err(io)?);
        }
        let o = h.n_params;
        let [betas, lls, betabar, sigma, beta_draws, betabar_draws, sigma_draws]: [Vec<f64>; 7] =
            arrays.try_into().expect("seven arrays");
        if betas.len() != h.n_respondents * o || lls.len() != h.n_respondents || sigma.len() != o * o {
            return Err(Error::CheckpointMismatch("array lengths disagree with the header".into()));
        }
        let resp = betas
            .chunks(o.max(1))
            .zip(&lls)
            .map(|(b, &ll)| Respondent { beta: b.to_vec(), ll })
            .collect();
        Ok(Self {
            data,
            priors,
            settings: h.settings,
            seed: h.seed,
            t: h.t,
            resp,
            betabar: DVector::from_vec(betabar),
            sigma: DMatrix::from_vec(o, o, sigma),
            step: h.step,
            window_accepts: h.window_accepts,
            kept_accepts: h.kept_accepts,
            kept_proposals: h.kept_proposals,
            beta_iterations: h.beta_iterations,
            beta_draws,
            betabar_draws,
            sigma_draws,
        })
    }
}
