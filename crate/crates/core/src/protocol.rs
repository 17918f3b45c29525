//! One-round worker → coordinator exchange.
//!
//! Each worker sends exactly one newline-free JSON object:
//!
//! | key          | type            | meaning                                        |
//! |--------------|-----------------|------------------------------------------------|
//! | `worker_id`  | integer         | shard identifier                               |
//! | `n`          | integer         | shard size                                     |
//! | `y`          | number          | `p / n`                                        |
//! | `k`          | integer         | spike index (1-based, model numbering)         |
//! | `j`          | integer         | sample eigen index used (1-based, 0 if unknown)|
//! | `alpha_hat`  | number or null  | local spike estimate                           |
//! | `gamma4_hat` | number or null  | local fourth-moment estimate                   |
//! | `u4sum_hat`  | number or null  | local `Σu⁴` estimate, null if not computed     |
//! | `status`     | string          | `ok`, `not_spiked`, `boundary` or `failed`     |
//!
//! Keys appear in this order and numbers use the shortest decimal form that
//! round-trips, so decoding recovers every field bit for bit.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::aggregate::{run_algorithm1, AggregateConfig, AggregateResult};
use crate::error::{Error, Result};
use crate::localnode::{local_report, Gamma4Mode, LocalEstimate, ReportOptions, SpikeHint};
use crate::sampler::{CovarianceRoot, LocalDataset};

pub const REPORT_KEYS: [&str; 9] = [
    "worker_id",
    "n",
    "y",
    "k",
    "j",
    "alpha_hat",
    "gamma4_hat",
    "u4sum_hat",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportStatus {
    Ok,
    NotSpiked,
    Boundary,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMessage {
    pub worker_id: u64,
    pub n: u64,
    pub y: f64,
    pub k: u64,
    pub j: u64,
    pub alpha_hat: Option<f64>,
    pub gamma4_hat: Option<f64>,
    pub u4sum_hat: Option<f64>,
    pub status: ReportStatus,
}

impl ReportMessage {
    pub fn from_estimate(est: &LocalEstimate) -> Self {
        ReportMessage {
            worker_id: est.worker_id as u64,
            n: est.n as u64,
            y: est.y,
            k: est.k as u64,
            j: est.j as u64,
            alpha_hat: Some(est.alpha_hat),
            gamma4_hat: Some(est.gamma4_hat),
            u4sum_hat: est.u4sum_hat,
            status: if est.boundary_flag {
                ReportStatus::Boundary
            } else {
                ReportStatus::Ok
            },
        }
    }

    /// Message for a worker whose pipeline errored.
    pub fn from_error(worker_id: usize, n: usize, p: usize, k: usize, err: &Error) -> Self {
        ReportMessage {
            worker_id: worker_id as u64,
            n: n as u64,
            y: if n > 0 { p as f64 / n as f64 } else { 0.0 },
            k: k as u64,
            j: 0,
            alpha_hat: None,
            gamma4_hat: None,
            u4sum_hat: None,
            status: match err {
                Error::NotSpiked { .. } => ReportStatus::NotSpiked,
                _ => ReportStatus::Failed,
            },
        }
    }

    /// The estimate carried by an `ok` or `boundary` message.
    pub fn to_estimate(&self) -> Option<LocalEstimate> {
        match self.status {
            ReportStatus::Ok | ReportStatus::Boundary => Some(LocalEstimate {
                worker_id: self.worker_id as usize,
                n: self.n as usize,
                y: self.y,
                k: self.k as usize,
                j: self.j as usize,
                alpha_hat: self.alpha_hat?,
                gamma4_hat: self.gamma4_hat?,
                u4sum_hat: self.u4sum_hat,
                boundary_flag: self.status == ReportStatus::Boundary,
            }),
            ReportStatus::NotSpiked | ReportStatus::Failed => None,
        }
    }

    /// Numeric fields actually carried.
    pub fn scalar_count(&self) -> usize {
        5 + [self.alpha_hat, self.gamma4_hat, self.u4sum_hat]
            .iter()
            .filter(|v| v.is_some())
            .count()
    }
}

pub fn encode_report(msg: &ReportMessage) -> Result<String> {
    if !msg.y.is_finite() {
        return Err(Error::NonFiniteField("y"));
    }
    for (name, v) in [
        ("alpha_hat", msg.alpha_hat),
        ("gamma4_hat", msg.gamma4_hat),
        ("u4sum_hat", msg.u4sum_hat),
    ] {
        if matches!(v, Some(x) if !x.is_finite()) {
            return Err(Error::NonFiniteField(name));
        }
    }
    if matches!(msg.status, ReportStatus::Ok | ReportStatus::Boundary) {
        if msg.alpha_hat.is_none() {
            return Err(Error::NonFiniteField("alpha_hat"));
        }
        if msg.gamma4_hat.is_none() {
            return Err(Error::NonFiniteField("gamma4_hat"));
        }
    }
    serde_json::to_string(msg).map_err(|e| Error::Parse(e.to_string()))
}

pub fn decode_report(line: &str) -> Result<ReportMessage> {
    let value: serde_json::Value = serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| Error::Parse(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Schema("report must be a JSON object".into()))?;
    if let Some(extra) = obj.keys().find(|k| !REPORT_KEYS.contains(&k.as_str())) {
        return Err(Error::Schema(format!("unknown key {extra:?}")));
    }
    if let Some(missing) = REPORT_KEYS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(Error::Schema(format!("missing key {missing:?}")));
    }
    let msg: ReportMessage = serde_json::from_value(value).map_err(|e| Error::Schema(e.to_string()))?;
    if matches!(msg.status, ReportStatus::Ok | ReportStatus::Boundary) && (msg.alpha_hat.is_none() || msg.gamma4_hat.is_none()) {
        return Err(Error::Schema("ok report without estimates".into()));
    }
    Ok(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TransportStats {
    pub messages_sent: usize,
    pub scalars_sent: usize,
    pub rounds: usize,
}

/// Cost of shipping every shard's covariance (upper triangle) to the centre.
pub fn pooled_cost_model(m: usize, p: usize) -> TransportStats {
    TransportStats {
        messages_sent: m,
        scalars_sent: m * p * (p + 1) / 2,
        rounds: 1,
    }
}

/// One worker's shard and instructions.
#[derive(Debug, Clone)]
pub struct WorkerTask {
    pub dataset: LocalDataset,
    pub hint: SpikeHint,
    pub options: ReportOptions,
    /// Known covariance root, needed only for whitened fourth-moment estimates.
    pub root: Option<CovarianceRoot>,
}

impl WorkerTask {
    /// Run the local pipeline; errors become `not_spiked`/`failed` messages.
    pub fn execute(&self) -> ReportMessage {
        match local_report(&self.dataset, self.hint, &self.options, self.root.as_ref()) {
            Ok(est) => ReportMessage::from_estimate(&est),
            Err(e) => {
                log::warn!("worker {} failed: {e}", self.dataset.worker_id);
                ReportMessage::from_error(self.dataset.worker_id, self.dataset.n(), self.dataset.p(), self.hint.k, &e)
            }
        }
    }

    /// Command-line arguments for the `worker` process mode.
    pub fn worker_args(&self, data_path: &std::path::Path) -> Vec<String> {
        let mut args = vec![
            "worker".to_string(),
            "--data".to_string(),
            data_path.display().to_string(),
            "--worker-id".to_string(),
            self.dataset.worker_id.to_string(),
            "--k".to_string(),
            self.hint.k.to_string(),
            "--side".to_string(),
            format!("{:?}", self.hint.side).to_lowercase(),
            "--spikes".to_string(),
            self.hint.m_total.to_string(),
        ];
        if !self.options.estimate_u4 {
            args.push("--skip-u4".to_string());
        }
        args
    }
}

/// How report lines travel from workers to the coordinator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transport {
    /// Worker threads pushing lines onto a channel.
    InProcess,
    /// One child process per worker, each running `program worker ...` on a
    /// CSV dump of its shard and printing its line to stdout.
    Stdio { program: PathBuf },
    /// Worker threads connecting to a loopback listener.
    Tcp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub result: AggregateResult,
    pub stats: TransportStats,
    /// Decoded messages in worker-id order.
    pub messages: Vec<ReportMessage>,
}

fn collect_in_process(tasks: &[WorkerTask]) -> Result<Vec<String>> {
    let (tx, rx) = mpsc::channel::<Result<String>>();
    std::thread::scope(|scope| {
        for task in tasks {
            let tx = tx.clone();
            scope.spawn(move || {
                let _ = tx.send(encode_report(&task.execute()));
            });
        }
    });
    drop(tx);
    rx.into_iter().collect()
}

fn collect_tcp(tasks: &[WorkerTask]) -> Result<Vec<String>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::scope(|scope| -> Result<Vec<String>> {
        let mut handles = Vec::with_capacity(tasks.len());
        for task in tasks {
            handles.push(scope.spawn(move || -> Result<()> {
                let line = encode_report(&task.execute())?;
                let mut stream = TcpStream::connect(addr)?;
                stream.write_all(line.as_bytes())?;
                stream.write_all(b"\n")?;
                Ok(())
            }));
        }
        let mut lines = Vec::with_capacity(tasks.len());
        for _ in 0..tasks.len() {
            let (stream, _) = listener.accept()?;
            let mut line = String::new();
            BufReader::new(stream).read_line(&mut line)?;
            lines.push(line);
        }
        for h in handles {
            h.join().map_err(|_| Error::Transport("worker thread panicked".into()))??;
        }
        Ok(lines)
    })
}

fn collect_stdio(tasks: &[WorkerTask], program: &std::path::Path) -> Result<Vec<String>> {
    let dir = tempfile::tempdir()?;
    let mut children = Vec::with_capacity(tasks.len());
    for task in tasks {
        if task.options.gamma4_mode != Gamma4Mode::GaussianAssumption {
            return Err(Error::Transport("stdio workers only support the Gaussian fourth-moment mode".into()));
        }
        let path = dir.path().join(format!("shard-{}.csv", task.dataset.worker_id));
        task.dataset.write_csv(&path)?;
        let child = Command::new(program)
            .args(task.worker_args(&path))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        children.push((task.dataset.worker_id, child));
    }
    let mut lines = Vec::with_capacity(children.len());
    for (id, child) in children {
        let out = child.wait_with_output()?;
        if !out.status.success() {
            log::warn!("worker process {id} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr));
            continue;
        }
        let text = String::from_utf8(out.stdout).map_err(|e| Error::Transport(e.to_string()))?;
        match text.lines().next() {
            Some(line) => lines.push(line.to_string()),
            None => log::warn!("worker process {id} produced no report"),
        }
    }
    Ok(lines)
}

/// Aggregate decoded messages. `p` is inferred from `y·n` when not given.
pub fn coordinate(messages: &[ReportMessage], p: Option<usize>, config: &AggregateConfig) -> Result<AggregateResult> {
    let mut sorted: Vec<&ReportMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.worker_id);
    let p = match p {
        Some(p) => p,
        None => infer_dimension(&sorted)?,
    };
    let reports: Vec<LocalEstimate> = sorted.iter().filter_map(|m| m.to_estimate()).collect();
    let failed: Vec<usize> = sorted
        .iter()
        .filter(|m| m.to_estimate().is_none())
        .map(|m| m.worker_id as usize)
        .collect();
    let mut result = run_algorithm1(&reports, p, config)?;
    result.excluded_workers.extend(failed);
    result.excluded_workers.sort_unstable();
    Ok(result)
}

fn infer_dimension(messages: &[&ReportMessage]) -> Result<usize> {
    // failed workers may not know a meaningful ratio
    let mut dims = messages
        .iter()
        .filter(|m| m.n > 0 && m.to_estimate().is_some())
        .map(|m| (m.y * m.n as f64).round() as usize);
    let p = dims.next().ok_or(Error::NoValidReports)?;
    if dims.any(|d| d != p) {
        return Err(Error::Schema("reports disagree on the dimension p".into()));
    }
    Ok(p)
}

/// Run one round: every worker emits one message, the coordinator buffers
/// all of them and aggregates once.
pub fn run_round(tasks: &[WorkerTask], transport: &Transport, config: &AggregateConfig) -> Result<RoundOutcome> {
    let first = tasks.first().ok_or(Error::NoValidReports)?;
    let p = first.dataset.p();
    if tasks.iter().any(|t| t.dataset.p() != p) {
        return Err(Error::InvalidShape("workers disagree on the dimension".into()));
    }
    let lines = match transport {
        Transport::InProcess => collect_in_process(tasks)?,
        Transport::Tcp => collect_tcp(tasks)?,
        Transport::Stdio { program } => collect_stdio(tasks, program)?,
    };
    let mut messages = lines.iter().map(|l| decode_report(l)).collect::<Result<Vec<_>>>()?;
    messages.sort_by_key(|m| m.worker_id);
    let stats = TransportStats {
        messages_sent: messages.len(),
        scalars_sent: messages.iter().map(ReportMessage::scalar_count).sum(),
        rounds: 1,
    };
    let mut result = coordinate(&messages, Some(p), config)?;
    let heard: Vec<usize> = messages.iter().map(|m| m.worker_id as usize).collect();
    result
        .excluded_workers
        .extend(tasks.iter().map(|t| t.dataset.worker_id).filter(|id| !heard.contains(id)));
    result.excluded_workers.sort_unstable();
    Ok(RoundOutcome {
        result,
        stats,
        messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{EntryDistribution, Population, Rotation, SpikedModel};
    use proptest::prelude::*;

    fn ok_message() -> ReportMessage {
        ReportMessage {
            worker_id: 3,
            n: 512,
            y: 100.0 / 512.0,
            k: 1,
            j: 1,
            alpha_hat: Some(10.123456789),
            gamma4_hat: Some(3.0),
            u4sum_hat: Some(0.97),
            status: ReportStatus::Ok,
        }
    }

    #[test]
    fn encoded_line_has_all_keys_in_order() {
        let line = encode_report(&ok_message()).unwrap();
        assert!(!line.contains('\n'));
        let mut last = 0;
        for key in REPORT_KEYS {
            let pos = line.find(&format!("\"{key}\"")).unwrap();
            assert!(pos >= last);
            last = pos;
        }
        assert_eq!(decode_report(&line).unwrap(), ok_message());
    }

    #[test]
    fn encode_rejects_non_finite() {
        let mut m = ok_message();
        m.alpha_hat = Some(f64::NAN);
        assert!(matches!(encode_report(&m), Err(Error::NonFiniteField("alpha_hat"))));
        let mut m = ok_message();
        m.alpha_hat = None;
        assert!(matches!(encode_report(&m), Err(Error::NonFiniteField("alpha_hat"))));
    }

    #[test]
    fn decode_errors() {
        let line = encode_report(&ok_message()).unwrap();
        assert!(matches!(decode_report(&line[..line.len() - 7]), Err(Error::Parse(_))));
        let extra = line.replacen('{', "{\"extra\":1,", 1);
        assert!(matches!(decode_report(&extra), Err(Error::Schema(_))));
        let missing = line.replacen("\"k\":1,", "", 1);
        assert!(matches!(decode_report(&missing), Err(Error::Schema(_))));
        assert!(matches!(decode_report("[1,2]"), Err(Error::Schema(_))));
    }

    fn arb_message() -> impl Strategy<Value = ReportMessage> {
        (
            any::<u32>(),
            1u64..1_000_000,
            any::<f64>().prop_filter("finite", |v| v.is_finite()),
            1u64..5,
            proptest::option::of(any::<f64>().prop_filter("finite", |v| v.is_finite())),
            prop_oneof![Just(ReportStatus::Ok), Just(ReportStatus::Boundary)],
            (1e-300f64..1e300, 0.0f64..=1.0),
        )
            .prop_map(|(id, n, y, k, u4, status, (a, g))| ReportMessage {
                worker_id: id as u64,
                n,
                y,
                k,
                j: k,
                alpha_hat: Some(a),
                gamma4_hat: Some(g * 10.0),
                u4sum_hat: u4,
                status,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn codec_round_trip_is_bit_exact(m in arb_message()) {
            let back = decode_report(&encode_report(&m).unwrap()).unwrap();
            prop_assert_eq!(back.y.to_bits(), m.y.to_bits());
            prop_assert_eq!(back.alpha_hat.map(f64::to_bits), m.alpha_hat.map(f64::to_bits));
            prop_assert_eq!(back.gamma4_hat.map(f64::to_bits), m.gamma4_hat.map(f64::to_bits));
            prop_assert_eq!(back.u4sum_hat.map(f64::to_bits), m.u4sum_hat.map(f64::to_bits));
            prop_assert_eq!(back, m);
        }
    }

    #[test]
    fn pooled_cost() {
        assert_eq!(pooled_cost_model(50, 100).scalars_sent, 252_500);
        assert_eq!(pooled_cost_model(1, 30).scalars_sent, 30 * 31 / 2);
    }

    fn tasks(m: usize, spike: f64) -> Vec<WorkerTask> {
        let model = SpikedModel::new(20, vec![spike], EntryDistribution::Gaussian, Rotation::Identity).unwrap();
        let pop = Population::new(model).unwrap();
        (0..m)
            .map(|i| WorkerTask {
                dataset: pop.sample(60 + 20 * i, 5, i).unwrap(),
                hint: SpikeHint::largest(),
                options: ReportOptions::default(),
                root: None,
            })
            .collect()
    }

    #[test]
    fn in_process_round() {
        let out = run_round(&tasks(3, 10.0), &Transport::InProcess, &AggregateConfig::default()).unwrap();
        assert_eq!(out.stats.messages_sent, 3);
        assert_eq!(out.stats.rounds, 1);
        assert!(out.stats.scalars_sent <= 8 * 3);
        assert!(out.result.excluded_workers.is_empty());
    }

    #[test]
    fn tcp_matches_in_process() {
        let t = tasks(4, 10.0);
        let a = run_round(&t, &Transport::InProcess, &AggregateConfig::default()).unwrap();
        let b = run_round(&t, &Transport::Tcp, &AggregateConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn not_spiked_worker_is_excluded() {
        let mut t = tasks(3, 10.0);
        // identity covariance: no spike to find on this shard
        let obs = nalgebra::DMatrix::from_fn(20, 40, |i, j| if j % 20 == i { if j < 20 { 1.0 } else { -1.0 } } else { 0.0 });
        t[1].dataset = LocalDataset::new(1, obs).unwrap();
        let out = run_round(&t, &Transport::InProcess, &AggregateConfig::default()).unwrap();
        assert_eq!(out.result.excluded_workers, vec![1]);
        assert_eq!(out.result.included_workers, vec![0, 2]);
        assert_eq!(out.messages[1].status, ReportStatus::NotSpiked);
        assert_eq!(out.stats.messages_sent, 3);
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let t = tasks(4, 10.0);
        let msgs: Vec<ReportMessage> = t.iter().map(WorkerTask::execute).collect();
        let mut rev = msgs.clone();
        rev.reverse();
        let cfg = AggregateConfig::default();
        assert_eq!(coordinate(&msgs, None, &cfg).unwrap(), coordinate(&rev, None, &cfg).unwrap());
    }
}
