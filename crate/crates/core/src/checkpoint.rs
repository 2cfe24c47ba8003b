//! Binary checkpoints: config, both parameter sets, optimiser moments,
//! region embeddings and grid.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hexgrid::HexGridSpec;
use crate::params::ParamStore;
use crate::region_embed::EmbeddingTable;
use crate::tensor::Tensor;
use crate::train::Trainer;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"HJCK";
const VERSION: u32 = 1;
const MAX_RECORDS: u64 = 1 << 20;
const MAX_NAME: u64 = 4096;
const MAX_NUMEL: u64 = 1 << 32;

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub trainer: Trainer,
    pub table: EmbeddingTable,
    pub spec: HexGridSpec,
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read, max: u64) -> Result<String> {
    let n = r.read_u64::<LittleEndian>()?;
    if n > max {
        return Err(Error::Format(format!("string of {n} bytes exceeds limit")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

fn write_tensors<'a>(w: &mut impl Write, items: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    w.write_u64::<LittleEndian>(items.len() as u64)?;
    for (name, t) in items {
        write_str(w, name)?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &s in t.shape() {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = r.read_u64::<LittleEndian>()?;
    if n > MAX_RECORDS {
        return Err(Error::Format(format!("{n} tensor records exceeds limit")));
    }
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let name = read_str(r, MAX_NAME)?;
        let rank = r.read_u32::<LittleEndian>()?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.read_u64::<LittleEndian>().map(|s| s as usize))
            .collect::<std::io::Result<Vec<usize>>>()?;
        let numel = shape.iter().try_fold(1u64, |a, &s| a.checked_mul(s as u64));
        let numel = match numel {
            Some(n) if n <= MAX_NUMEL => n as usize,
            _ => return Err(Error::Format(format!("tensor {name} is too large"))),
        };
        let mut data = vec![0.0; numel];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

fn store_from(template: &ParamStore, records: Vec<(String, Tensor)>) -> Result<ParamStore> {
    let mut loaded = ParamStore::new();
    for (name, t) in records {
        loaded.insert(&name, t);
    }
    let mut store = template.clone();
    store.load_from(&loaded)?;
    Ok(store)
}

fn moments(store: &ParamStore, m: &[Tensor]) -> Vec<(String, Tensor)> {
    store
        .ids()
        .map(|id| store.name(id).to_string())
        .zip(m.iter().cloned())
        .collect()
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let t = &self.trainer;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_all(t.config.hash().as_bytes())?;
        write_str(w, &t.config.to_toml())?;
        w.write_u64::<LittleEndian>(t.step)?;
        w.write_u64::<LittleEndian>(t.epoch as u64)?;
        w.write_u64::<LittleEndian>(t.state.trained_steps)?;
        w.write_u64::<LittleEndian>(t.adam.step)?;
        write_tensors(w, t.state.online.iter().collect::<Vec<_>>().into_iter())?;
        write_tensors(w, t.state.target.iter().collect::<Vec<_>>().into_iter())?;
        for m in [&t.adam.m, &t.adam.v] {
            let named = moments(&t.state.online, m);
            write_tensors(
                w,
                named
                    .iter()
                    .map(|(n, t)| (n.as_str(), t))
                    .collect::<Vec<_>>()
                    .into_iter(),
            )?;
        }
        self.table.write_to(w)?;
        let s = &self.spec;
        for v in [
            s.origin_lon,
            s.origin_lat,
            s.edge_len_m,
            s.min_lon,
            s.min_lat,
            s.max_lon,
            s.max_lat,
        ] {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut hash = [0u8; 64];
        r.read_exact(&mut hash)?;
        let text = read_str(r, 1 << 24)?;
        let config = RunConfig::from_toml(&text)?;
        if config.hash().as_bytes() != hash {
            return Err(Error::Format("config hash mismatch".into()));
        }
        let mut trainer = Trainer::new(config)?;
        trainer.step = r.read_u64::<LittleEndian>()?;
        trainer.epoch = r.read_u64::<LittleEndian>()? as usize;
        trainer.state.trained_steps = r.read_u64::<LittleEndian>()?;
        trainer.adam.step = r.read_u64::<LittleEndian>()?;
        trainer.state.online = store_from(&trainer.state.online, read_tensors(r)?)?;
        trainer.state.target = store_from(&trainer.state.target, read_tensors(r)?)?;
        let m = store_from(&trainer.state.online, read_tensors(r)?)?;
        let v = store_from(&trainer.state.online, read_tensors(r)?)?;
        trainer.adam.m = m.iter().map(|(_, t)| t.clone()).collect();
        trainer.adam.v = v.iter().map(|(_, t)| t.clone()).collect();
        let table = EmbeddingTable::read_from(r)?;
        let mut g = [0.0; 7];
        r.read_f64_into::<LittleEndian>(&mut g)?;
        let spec = HexGridSpec {
            origin_lon: g[0],
            origin_lat: g[1],
            edge_len_m: g[2],
            min_lon: g[3],
            min_lat: g[4],
            max_lon: g[5],
            max_lat: g[6],
        };
        spec.validate()?;
        Ok(Self { trainer, table, spec })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a truncated checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;
    use crate::hexgrid::build_region_graph;
    use crate::region_embed::pretrain_cells;
    use crate::train::prepare_embeddings;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.dim = 8;
        c.model.heads = 2;
        c.model.ff_hidden = 16;
        c.model.max_len = 64;
        c.data.filter.min_len = 12;
        c.data.filter.max_len = 40;
        c.grid.half_extent_m = 1_000.0;
        c.grid.edge_len_m = 100.0;
        c.walk.walks_per_node = 2;
        c.walk.walk_len = 10;
        c.walk.epochs = 1;
        c.train.batch_size = 4;
        c
    }

    fn setup() -> (Checkpoint, Vec<Tensor>) {
        let cfg = tiny();
        let spec = cfg.grid.spec();
        let trajs = synth_generate(12, &spec, &cfg.data.filter, &cfg.data.synth, 2).unwrap();
        let (g, _) = build_region_graph(trajs.iter().flat_map(|t| &t.points), &spec).unwrap();
        let table = pretrain_cells(&g, cfg.model.dim, &cfg.walk, 1).unwrap().table;
        let data = prepare_embeddings(&trajs, &table, &spec).unwrap();
        let trainer = Trainer::new(cfg).unwrap();
        (Checkpoint { trainer, table, spec }, data)
    }

    fn bytes(c: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf
    }

    #[test]
    fn resume_is_bit_identical() {
        let (mut ck, data) = setup();
        ck.trainer.run_epoch(&data, &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e1.ckpt");
        ck.save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap();
        assert_eq!(bytes(&resumed), bytes(&ck));
        ck.trainer.run_epoch(&data, &mut |_, _| Ok(())).unwrap();
        resumed.trainer.run_epoch(&data, &mut |_, _| Ok(())).unwrap();
        assert_eq!(bytes(&resumed), bytes(&ck));
        assert_eq!(resumed.trainer.state.online, ck.trainer.state.online);
    }

    #[test]
    fn corruption_is_detected() {
        let (ck, _) = setup();
        let good = bytes(&ck);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let mut bad = good.clone();
        bad[8] ^= 1;
        assert!(matches!(
            Checkpoint::read_from(&mut bad.as_slice()),
            Err(Error::Format(_))
        ));
        let cut = &good[..good.len() / 2];
        assert!(Checkpoint::read_from(&mut &cut[..]).is_err());
    }
}
