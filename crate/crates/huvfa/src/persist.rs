//! On-disk formats.
//!
//! Everything numeric is little-endian 64-bit; matrices are written
//! row-major regardless of in-memory layout. Formats:
//!
//! - Q-tables (`.hqt`): magic `HQT1`, then states, options, actions,
//!   goal x, goal y as u64, gamma as f64, then the `Q_omega` and `Q_u`
//!   tables row-major.
//! - Transition histories (`.csv`): one line per transition —
//!   `episode,step,s_x,s_y,option,action,reward,next_x,next_y,done`.
//! - CP factors (`.cpf`): magic `CPF1`, order and rank as u64, the
//!   axis lengths, then each factor matrix row-major.
//! - Stream weights (`.snw`): magic `SNW1`, input/hidden/output sizes
//!   and the originating seed as u64, then `w1`, `w2` row-major, `b1`,
//!   `b2`.
//! - Model bundles: a directory holding `manifest.toml`, one weight
//!   file per stream, and the two factor files.
//! - Horde artifacts: a directory holding `manifest.toml` and one
//!   Q-table file per goal.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ActionId, GridPos, Transition};
use crate::horde::{Horde, HistoryRecord, TransitionHistory};
use crate::model::{BuildKind, HierValueModel, Stream, StreamInput, ValueModel};
use crate::net::{StreamNet, CODEC_VERSION, HIDDEN};
use crate::tabular::{OptionId, TabularHQ};
use crate::tensor::CpFactors;

#[derive(Error, Debug)]
pub enum PersistError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl PersistError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PersistError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn format(path: &Path, reason: impl Into<String>) -> Self {
        PersistError::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    fn new(magic: &[u8; 4]) -> Self {
        BinWriter {
            buf: magic.to_vec(),
        }
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: impl IntoIterator<Item = f64>) {
        for v in vs {
            self.f64(v);
        }
    }

    fn write(self, path: &Path) -> Result<(), PersistError> {
        fs::write(path, &self.buf).map_err(|e| PersistError::io(path, e))
    }
}

struct BinReader<'p> {
    path: &'p Path,
    buf: Vec<u8>,
    at: usize,
}

impl<'p> BinReader<'p> {
    fn open(path: &'p Path, magic: &[u8; 4]) -> Result<Self, PersistError> {
        let buf = fs::read(path).map_err(|e| PersistError::io(path, e))?;
        if buf.len() < 4 || &buf[..4] != magic {
            return Err(PersistError::format(
                path,
                format!("missing magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        Ok(BinReader { path, buf, at: 4 })
    }

    fn take(&mut self, n: usize) -> Result<&[u8], PersistError> {
        if self.at + n > self.buf.len() {
            return Err(PersistError::format(self.path, "truncated file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, PersistError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, PersistError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, PersistError> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn finish(self) -> Result<(), PersistError> {
        if self.at != self.buf.len() {
            return Err(PersistError::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

pub fn save_qtable(path: &Path, table: &TabularHQ, gamma: f64) -> Result<(), PersistError> {
    let mut w = BinWriter::new(b"HQT1");
    w.u64(table.n_states() as u64);
    w.u64(OptionId::COUNT as u64);
    w.u64(ActionId::COUNT as u64);
    w.u64(table.goal.x as u64);
    w.u64(table.goal.y as u64);
    w.f64(gamma);
    let (q_omega, q_u) = table.raw_tables();
    w.f64s(q_omega.iter().copied());
    w.f64s(q_u.iter().copied());
    w.write(path)
}

pub fn load_qtable(path: &Path) -> Result<(TabularHQ, f64), PersistError> {
    let mut r = BinReader::open(path, b"HQT1")?;
    let n_states = r.u64()? as usize;
    let n_options = r.u64()? as usize;
    let n_actions = r.u64()? as usize;
    if n_options != OptionId::COUNT || n_actions != ActionId::COUNT {
        return Err(PersistError::format(path, "option/action count mismatch"));
    }
    let goal = GridPos::new(r.u64()? as usize, r.u64()? as usize);
    let gamma = r.f64()?;
    let q_omega = r.f64s(n_states * n_options)?;
    let q_u = r.f64s(n_states * n_options * n_actions)?;
    r.finish()?;
    Ok((TabularHQ::from_raw(n_states, goal, q_omega, q_u), gamma))
}

pub fn save_history(path: &Path, history: &TransitionHistory) -> Result<(), PersistError> {
    let mut out = String::from("# huvfa-history v1\n");
    out.push_str("# episode,step,s_x,s_y,option,action,reward,next_x,next_y,done\n");
    for rec in &history.records {
        let t = rec.t;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            rec.episode,
            rec.step,
            t.s.x,
            t.s.y,
            t.o.index(),
            t.a.index(),
            t.r as i64,
            t.s_next.x,
            t.s_next.y,
            t.done as u8,
        ));
    }
    fs::write(path, out).map_err(|e| PersistError::io(path, e))
}

pub fn load_history(path: &Path) -> Result<TransitionHistory, PersistError> {
    let text = fs::read_to_string(path).map_err(|e| PersistError::io(path, e))?;
    let mut history = TransitionHistory::default();
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(PersistError::format(
                path,
                format!("line {}: bad field count", ln + 1),
            ));
        }
        let parse = |i: usize| -> Result<usize, PersistError> {
            fields[i]
                .parse()
                .map_err(|_| PersistError::format(path, format!("line {}: bad number", ln + 1)))
        };
        let episode = parse(0)?;
        let rec = HistoryRecord {
            episode,
            step: parse(1)?,
            t: Transition {
                s: GridPos::new(parse(2)?, parse(3)?),
                o: OptionId::from_index(parse(4)?),
                a: ActionId::from_index(parse(5)?),
                r: parse(6)? as f64,
                s_next: GridPos::new(parse(7)?, parse(8)?),
                done: parse(9)? != 0,
            },
        };
        history.episodes = history.episodes.max(episode + 1);
        history.records.push(rec);
    }
    Ok(history)
}

pub fn save_factors(path: &Path, factors: &CpFactors) -> Result<(), PersistError> {
    let mut w = BinWriter::new(b"CPF1");
    w.u64(factors.order() as u64);
    w.u64(factors.rank as u64);
    for d in 0..factors.order() {
        w.u64(factors.axis_len(d) as u64);
    }
    for f in &factors.factors {
        for i in 0..f.nrows() {
            for j in 0..f.ncols() {
                w.f64(f[(i, j)]);
            }
        }
    }
    w.write(path)
}

pub fn load_factors(path: &Path) -> Result<CpFactors, PersistError> {
    let mut r = BinReader::open(path, b"CPF1")?;
    let order = r.u64()? as usize;
    let rank = r.u64()? as usize;
    let lens: Vec<usize> = (0..order)
        .map(|_| r.u64().map(|v| v as usize))
        .collect::<Result<_, _>>()?;
    let mut factors = Vec::with_capacity(order);
    for len in lens {
        let data = r.f64s(len * rank)?;
        factors.push(DMatrix::from_row_slice(len, rank, &data));
    }
    r.finish()?;
    Ok(CpFactors { rank, factors })
}

pub fn save_net(path: &Path, net: &StreamNet, seed: u64) -> Result<(), PersistError> {
    let mut w = BinWriter::new(b"SNW1");
    w.u64(net.input_size() as u64);
    w.u64(HIDDEN as u64);
    w.u64(net.output_size() as u64);
    w.u64(seed);
    for m in [&net.w1, &net.w2] {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                w.f64(m[(i, j)]);
            }
        }
    }
    w.f64s(net.b1.iter().copied());
    w.f64s(net.b2.iter().copied());
    w.write(path)
}

pub fn load_net(path: &Path) -> Result<(StreamNet, u64), PersistError> {
    let mut r = BinReader::open(path, b"SNW1")?;
    let input = r.u64()? as usize;
    let hidden = r.u64()? as usize;
    let output = r.u64()? as usize;
    if hidden != HIDDEN {
        return Err(PersistError::format(path, "hidden width mismatch"));
    }
    let seed = r.u64()?;
    let w1 = DMatrix::from_row_slice(hidden, input, &r.f64s(hidden * input)?);
    let w2 = DMatrix::from_row_slice(output, hidden, &r.f64s(output * hidden)?);
    let b1 = DVector::from_vec(r.f64s(hidden)?);
    let b2 = DVector::from_vec(r.f64s(output)?);
    r.finish()?;
    Ok((StreamNet { w1, b1, w2, b2 }, seed))
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Bundle manifest: everything needed to reassemble a model pair from
/// its weight files. `created_unix` is the only field allowed to vary
/// between otherwise identical runs.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct BundleManifest {
    pub kind: String,
    pub rank: usize,
    pub codec: String,
    pub omega_streams: Vec<String>,
    pub u_streams: Vec<String>,
    pub created_unix: u64,
}

fn stream_file(level: &str, input: StreamInput) -> String {
    format!("{level}_{}.snw", input.name())
}

pub fn save_bundle(
    dir: &Path,
    model: &HierValueModel,
    omega_factors: &CpFactors,
    u_factors: &CpFactors,
    seed: u64,
) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(|e| PersistError::io(dir, e))?;
    let manifest = BundleManifest {
        kind: model.kind.name().to_string(),
        rank: model.omega.rank(),
        codec: CODEC_VERSION.to_string(),
        omega_streams: model
            .omega
            .streams
            .iter()
            .map(|s| s.input.name().to_string())
            .collect(),
        u_streams: model
            .u
            .streams
            .iter()
            .map(|s| s.input.name().to_string())
            .collect(),
        created_unix: unix_now(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| PersistError::format(dir, format!("manifest encode: {e}")))?;
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, text).map_err(|e| PersistError::io(&manifest_path, e))?;
    for (level, vm) in [("omega", &model.omega), ("u", &model.u)] {
        for st in &vm.streams {
            save_net(&dir.join(stream_file(level, st.input)), &st.net, seed)?;
        }
    }
    save_factors(&dir.join("omega.cpf"), omega_factors)?;
    save_factors(&dir.join("u.cpf"), u_factors)?;
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<(HierValueModel, BundleManifest), PersistError> {
    let manifest_path = dir.join("manifest.toml");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| PersistError::io(&manifest_path, e))?;
    let manifest: BundleManifest = toml::from_str(&text)
        .map_err(|e| PersistError::format(&manifest_path, format!("manifest decode: {e}")))?;
    let kind = BuildKind::from_name(&manifest.kind)
        .ok_or_else(|| PersistError::format(&manifest_path, "unknown build kind"))?;
    let load_level = |level: &str, names: &[String]| -> Result<ValueModel, PersistError> {
        let mut streams = Vec::new();
        for name in names {
            let input = StreamInput::from_name(name)
                .ok_or_else(|| PersistError::format(&manifest_path, "unknown stream"))?;
            let (net, _) = load_net(&dir.join(stream_file(level, input)))?;
            streams.push(Stream { input, net });
        }
        Ok(ValueModel { streams })
    };
    let model = HierValueModel {
        kind,
        omega: load_level("omega", &manifest.omega_streams)?,
        u: load_level("u", &manifest.u_streams)?,
    };
    Ok((model, manifest))
}

/// Horde artifact manifest: the goal list plus the fixed evaluation
/// goal subsets drawn at training time.
#[derive(Serialize, Deserialize, Debug, Clone)]
pub struct HordeManifest {
    pub seed: u64,
    pub gamma: f64,
    pub goals: Vec<(usize, usize)>,
    pub eval_trained: Vec<(usize, usize)>,
    pub eval_unseen: Vec<(usize, usize)>,
    pub created_unix: u64,
}

fn qtable_file(goal: GridPos) -> String {
    format!("goal_{:02}_{:02}.hqt", goal.x, goal.y)
}

pub fn save_horde(
    dir: &Path,
    horde: &Horde,
    gamma: f64,
    seed: u64,
    eval_trained: &[GridPos],
    eval_unseen: &[GridPos],
) -> Result<(), PersistError> {
    fs::create_dir_all(dir).map_err(|e| PersistError::io(dir, e))?;
    let manifest = HordeManifest {
        seed,
        gamma,
        goals: horde.goals.iter().map(|g| (g.x, g.y)).collect(),
        eval_trained: eval_trained.iter().map(|g| (g.x, g.y)).collect(),
        eval_unseen: eval_unseen.iter().map(|g| (g.x, g.y)).collect(),
        created_unix: unix_now(),
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| PersistError::format(dir, format!("manifest encode: {e}")))?;
    let manifest_path = dir.join("manifest.toml");
    fs::write(&manifest_path, text).map_err(|e| PersistError::io(&manifest_path, e))?;
    for (goal, table) in horde.goals.iter().zip(&horde.learners) {
        save_qtable(&dir.join(qtable_file(*goal)), table, gamma)?;
    }
    Ok(())
}

pub fn load_horde(dir: &Path) -> Result<(Horde, HordeManifest), PersistError> {
    let manifest_path = dir.join("manifest.toml");
    let text =
        fs::read_to_string(&manifest_path).map_err(|e| PersistError::io(&manifest_path, e))?;
    let manifest: HordeManifest = toml::from_str(&text)
        .map_err(|e| PersistError::format(&manifest_path, format!("manifest decode: {e}")))?;
    let mut goals = Vec::new();
    let mut learners = Vec::new();
    for (x, y) in &manifest.goals {
        let goal = GridPos::new(*x, *y);
        let (table, _) = load_qtable(&dir.join(qtable_file(goal)))?;
        goals.push(goal);
        learners.push(table);
    }
    Ok((Horde { goals, learners }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FourRoomsWorld, StateSpace};
    use crate::net::TrainConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn qtable_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hqt");
        let mut table = TabularHQ::new(6, GridPos::new(3, 4));
        table.set_q_omega(2, 1, 0.123456789);
        table.set_q_u(5, 3, 2, -7.5e-3);
        save_qtable(&path, &table, 0.99).unwrap();
        let (loaded, gamma) = load_qtable(&path).unwrap();
        assert_eq!(loaded, table);
        assert_eq!(gamma, 0.99);
        // Same bytes on a second save.
        let bytes1 = std::fs::read(&path).unwrap();
        save_qtable(&path, &table, 0.99).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn history_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let history = TransitionHistory {
            episodes: 2,
            records: vec![
                HistoryRecord {
                    episode: 0,
                    step: 0,
                    t: Transition {
                        s: GridPos::new(1, 2),
                        o: OptionId(3),
                        a: ActionId::Left,
                        r: 0.0,
                        s_next: GridPos::new(1, 3),
                        done: false,
                    },
                },
                HistoryRecord {
                    episode: 1,
                    step: 0,
                    t: Transition {
                        s: GridPos::new(8, 9),
                        o: OptionId(0),
                        a: ActionId::Right,
                        r: 1.0,
                        s_next: GridPos::new(9, 9),
                        done: true,
                    },
                },
            ],
        };
        save_history(&path, &history).unwrap();
        let loaded = load_history(&path).unwrap();
        assert_eq!(loaded.episodes, 2);
        assert_eq!(loaded.records.len(), 2);
        assert_eq!(loaded.records[1].t, history.records[1].t);
    }

    #[test]
    fn factors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.cpf");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let factors = CpFactors {
            rank: 3,
            factors: vec![
                DMatrix::from_fn(4, 3, |_, _| rng.gen::<f64>()),
                DMatrix::from_fn(5, 3, |_, _| rng.gen::<f64>()),
            ],
        };
        save_factors(&path, &factors).unwrap();
        let loaded = load_factors(&path).unwrap();
        assert_eq!(loaded, factors);
    }

    #[test]
    fn net_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.snw");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = StreamNet::new(6, 5, &mut rng);
        save_net(&path, &net, 77).unwrap();
        let (loaded, seed) = load_net(&path).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(seed, 77);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hqt");
        let table = TabularHQ::new(4, GridPos::new(1, 1));
        save_qtable(&path, &table, 0.9).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_qtable(&path),
            Err(PersistError::Format { .. })
        ));
        std::fs::write(&path, b"XXXX").unwrap();
        assert!(matches!(
            load_qtable(&path),
            Err(PersistError::Format { .. })
        ));
    }

    #[test]
    fn bundle_round_trips_and_reproduces_values() {
        let dir = tempfile::tempdir().unwrap();
        let world = FourRoomsWorld::load_layout();
        let space = StateSpace::new(&world);
        let goals = vec![GridPos::new(2, 2), GridPos::new(9, 2), GridPos::new(3, 10)];
        let cfg = crate::tabular::LearnerConfig {
            episodes: 500,
            ..Default::default()
        };
        let horde = Horde::train(&world, &space, &goals, &cfg, 3);
        let tc = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let built = crate::model::build_supervised(&space, &horde, 4, &tc, 3).unwrap();
        save_bundle(
            dir.path(),
            &built.model,
            &built.omega_factors,
            &built.u_factors,
            3,
        )
        .unwrap();
        let (loaded, manifest) = load_bundle(dir.path()).unwrap();
        assert_eq!(manifest.kind, "supervised");
        assert_eq!(manifest.rank, 4);
        assert_eq!(manifest.omega_streams.len(), 3);
        assert_eq!(manifest.u_streams.len(), 4);
        // Loaded model reproduces values bit for bit.
        let s = GridPos::new(5, 5);
        for o in OptionId::ALL {
            assert_eq!(
                loaded.q_omega(s, goals[0], o),
                built.model.q_omega(s, goals[0], o)
            );
        }
        let factors = load_factors(&dir.path().join("omega.cpf")).unwrap();
        assert_eq!(factors, built.omega_factors);
    }

    #[test]
    fn horde_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let world = FourRoomsWorld::load_layout();
        let space = StateSpace::new(&world);
        let goals = vec![GridPos::new(2, 2), GridPos::new(9, 2)];
        let cfg = crate::tabular::LearnerConfig {
            episodes: 300,
            ..Default::default()
        };
        let horde = Horde::train(&world, &space, &goals, &cfg, 4);
        save_horde(
            dir.path(),
            &horde,
            0.99,
            4,
            &goals[..1],
            &[GridPos::new(9, 9)],
        )
        .unwrap();
        let (loaded, manifest) = load_horde(dir.path()).unwrap();
        assert_eq!(loaded.goals, horde.goals);
        assert_eq!(loaded.learners, horde.learners);
        assert_eq!(manifest.eval_unseen, vec![(9, 9)]);
    }
}
