//! Training checkpoints: a text header with a tensor manifest, followed by the
//! tensors as little-endian `f64`.
//!
//! ```text
//! durnn-checkpoint 1
//! config_hash <sha256>
//! iteration <n>
//! rng <state>
//! adam_steps <n>
//! plateau <best bits> <stale> <decays>
//! tensors <count>
//! tensor <name> <rows> <cols> <byte offset>
//! ...
//! config <line count>
//! <config lines>
//! end
//! <blob>
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use durnn::linalg::RngState;
use durnn::optim::AdamState;
use durnn::{Network, ParamKind};

use crate::config::ExperimentConfig;

const MAGIC: &str = "durnn-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub iteration: u64,
    pub rng: RngState,
    pub adam_steps: u64,
    /// Plateau detector `(best, stale, decays)`.
    pub plateau: (f64, u32, u32),
    pub tensors: Vec<NamedTensor>,
}

/// Network tensors with names and shapes, in optimiser order.
pub fn network_tensors(net: &Network) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        for k in ParamKind::ALL {
            let (rows, cols) = layer.params.shape_of(k);
            out.push(NamedTensor {
                name: format!("layer.{}.{}", l + 1, k.name()),
                rows,
                cols,
                data: layer.params.get(k).to_vec(),
            });
        }
    }
    out.push(NamedTensor {
        name: "readout.w_out".into(),
        rows: net.readout.w_out.rows(),
        cols: net.readout.w_out.cols(),
        data: net.readout.w_out.as_slice().to_vec(),
    });
    out.push(NamedTensor {
        name: "readout.b_out".into(),
        rows: net.readout.b_out.len(),
        cols: 1,
        data: net.readout.b_out.clone(),
    });
    out
}

fn network_slots(net: &mut Network) -> Vec<&mut [f64]> {
    let mut out: Vec<&mut [f64]> = Vec::new();
    let Network { layers, readout, .. } = net;
    for layer in layers.iter_mut() {
        let p = &mut layer.params;
        // split borrows by taking each field once
        let durnn::LayerParams {
            w_in,
            w_rec,
            b_short,
            w_ss,
            w_ls,
            b_s,
            b_thre,
            w_s,
            u,
            b_long,
        } = p;
        out.extend([
            w_in.as_mut_slice(),
            w_rec.as_mut_slice(),
            b_short.as_mut_slice(),
            w_ss.as_mut_slice(),
            w_ls.as_mut_slice(),
            b_s.as_mut_slice(),
            std::slice::from_mut(b_thre),
            w_s.as_mut_slice(),
            u.as_mut_slice(),
            b_long.as_mut_slice(),
        ]);
    }
    out.push(readout.w_out.as_mut_slice());
    out.push(readout.b_out.as_mut_slice());
    out
}

impl Checkpoint {
    pub fn capture(
        cfg: &ExperimentConfig,
        net: &Network,
        adam: &AdamState,
        plateau: (f64, u32, u32),
        rng: RngState,
        iteration: u64,
    ) -> Self {
        let mut tensors = network_tensors(net);
        let shapes: Vec<(String, usize, usize)> = tensors.iter().map(|t| (t.name.clone(), t.rows, t.cols)).collect();
        for (prefix, moments) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
            for ((name, rows, cols), data) in shapes.iter().zip(moments) {
                tensors.push(NamedTensor {
                    name: format!("{prefix}.{name}"),
                    rows: *rows,
                    cols: *cols,
                    data: data.clone(),
                });
            }
        }
        Checkpoint {
            config_text: cfg.to_text(),
            config_hash: cfg.architecture_hash(),
            iteration,
            rng,
            adam_steps: adam.step_count,
            plateau,
            tensors,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::parse(&self.config_text).context("config stored in checkpoint")
    }

    /// Copies the stored tensors into `net` and `adam`, which must have been
    /// built for a config with the same architecture hash.
    pub fn restore(&self, cfg: &ExperimentConfig, net: &mut Network, adam: &mut AdamState) -> Result<()> {
        let expected = cfg.architecture_hash();
        if expected != self.config_hash {
            bail!(
                "checkpoint architecture {} does not match the config ({})",
                &self.config_hash[..12],
                &expected[..12]
            );
        }
        let layout = network_tensors(net);
        let count = layout.len();
        ensure!(self.tensors.len() == 3 * count, "checkpoint holds {} tensors, expected {}", self.tensors.len(), 3 * count);
        for (i, want) in layout.iter().enumerate() {
            for (j, prefix) in ["", "adam.m.", "adam.v."].iter().enumerate() {
                let got = &self.tensors[i + j * count];
                ensure!(
                    got.name == format!("{prefix}{}", want.name) && got.rows == want.rows && got.cols == want.cols,
                    "tensor {} ({}x{}) does not match {}{} ({}x{})",
                    got.name,
                    got.rows,
                    got.cols,
                    prefix,
                    want.name,
                    want.rows,
                    want.cols
                );
            }
        }
        for (slot, t) in network_slots(net).into_iter().zip(&self.tensors) {
            slot.copy_from_slice(&t.data);
        }
        adam.m = self.tensors[count..2 * count].iter().map(|t| t.data.clone()).collect();
        adam.v = self.tensors[2 * count..].iter().map(|t| t.data.clone()).collect();
        adam.step_count = self.adam_steps;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        head.push_str(&format!("config_hash {}\n", self.config_hash));
        head.push_str(&format!("iteration {}\n", self.iteration));
        head.push_str(&format!("rng {}\n", self.rng.to_hex()));
        head.push_str(&format!("adam_steps {}\n", self.adam_steps));
        let (best, stale, decays) = self.plateau;
        head.push_str(&format!("plateau {:016x} {stale} {decays}\n", best.to_bits()));
        head.push_str(&format!("tensors {}\n", self.tensors.len()));
        let mut offset = 0usize;
        for t in &self.tensors {
            head.push_str(&format!("tensor {} {} {} {}\n", t.name, t.rows, t.cols, offset));
            offset += 8 * t.data.len();
        }
        let lines: Vec<&str> = self.config_text.lines().collect();
        head.push_str(&format!("config {}\n", lines.len()));
        for l in lines {
            head.push_str(l);
            head.push('\n');
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        bytes.reserve(offset);
        for t in &self.tensors {
            for x in &t.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| anyhow!("truncated checkpoint header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).context("checkpoint header is not UTF-8")
        };
        ensure!(line()? == MAGIC, "not a durnn checkpoint (or unsupported version)");
        let mut field = |key: &str| -> Result<String> {
            let l = line()?;
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| anyhow!("expected `{key}` in checkpoint header, got `{l}`"))
        };
        let config_hash = field("config_hash")?;
        let iteration = field("iteration")?.parse()?;
        let rng = RngState::from_hex(&field("rng")?)?;
        let adam_steps = field("adam_steps")?.parse()?;
        let plateau_s = field("plateau")?;
        let p: Vec<&str> = plateau_s.split(' ').collect();
        ensure!(p.len() == 3, "malformed plateau line");
        let plateau = (f64::from_bits(u64::from_str_radix(p[0], 16)?), p[1].parse()?, p[2].parse()?);
        let count: usize = field("tensors")?.parse()?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let t = field("tensor")?;
            let f: Vec<&str> = t.split(' ').collect();
            ensure!(f.len() == 4, "malformed tensor line `{t}`");
            manifest.push((f[0].to_string(), f[1].parse::<usize>()?, f[2].parse::<usize>()?, f[3].parse::<usize>()?));
        }
        let n_lines: usize = field("config")?.parse()?;
        let mut config_text = String::new();
        for _ in 0..n_lines {
            config_text.push_str(line()?);
            config_text.push('\n');
        }
        ensure!(line()? == "end", "missing end of checkpoint header");
        let blob = &bytes[pos..];
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(count);
        for (name, rows, cols, offset) in manifest {
            ensure!(offset == expected_offset, "tensor {name}: offset {offset}, expected {expected_offset}");
            let len = rows * cols * 8;
            ensure!(offset + len <= blob.len(), "tensor {name} runs past the end of the blob");
            let data = blob[offset..offset + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(NamedTensor { name, rows, cols, data });
            expected_offset += len;
        }
        ensure!(
            expected_offset == blob.len(),
            "blob holds {} bytes but the manifest accounts for {expected_offset}",
            blob.len()
        );
        Ok(Checkpoint {
            config_text,
            config_hash,
            iteration,
            rng,
            adam_steps,
            plateau,
            tensors,
        })
    }

    /// Writes through a temporary file so an interrupted save never replaces
    /// the previous checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("parsing checkpoint {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use durnn::SeededRng;

    fn sample() -> (ExperimentConfig, Network, AdamState) {
        let mut cfg = ExperimentConfig::adding(10);
        cfg.layers[0].neurons = 3;
        let mut rng = SeededRng::new(3);
        let net = Network::init(2, &cfg.layer_specs().unwrap(), durnn::Head::Regression, 1.0, &mut rng).unwrap();
        let mut adam = AdamState::for_network(&net);
        for m in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            for x in m.iter_mut() {
                *x = rng.gaussian();
            }
        }
        adam.step_count = 17;
        (cfg, net, adam)
    }

    #[test]
    fn bytes_round_trip_bitwise() {
        let (cfg, net, adam) = sample();
        let ck = Checkpoint::capture(&cfg, &net, &adam, (0.25, 2, 1), SeededRng::new(9).state(), 42);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let (_, mut net2, mut adam2) = {
            let mut c = cfg.clone();
            c.seed = 99;
            let mut rng = SeededRng::new(99);
            let n = Network::init(2, &c.layer_specs().unwrap(), durnn::Head::Regression, 0.0, &mut rng).unwrap();
            let a = AdamState::for_network(&n);
            (c, n, a)
        };
        back.restore(&cfg, &mut net2, &mut adam2).unwrap();
        assert_eq!(net2, net);
        assert_eq!(adam2, adam);
    }

    #[test]
    fn rejects_other_architecture_and_corruption() {
        let (cfg, net, adam) = sample();
        let ck = Checkpoint::capture(&cfg, &net, &adam, (f64::INFINITY, 0, 0), SeededRng::new(1).state(), 0);
        let mut other = cfg.clone();
        other.layers[0].neurons = 4;
        let mut rng = SeededRng::new(1);
        let mut net4 = Network::init(2, &other.layer_specs().unwrap(), durnn::Head::Regression, 1.0, &mut rng).unwrap();
        let mut adam4 = AdamState::for_network(&net4);
        assert!(ck.restore(&other, &mut net4, &mut adam4).is_err());

        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[1..]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
