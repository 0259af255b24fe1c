//! Session state machine, independent of transport and storage.

use std::collections::BTreeSet;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use veto_core::evaluation::hard_assign;
use veto_core::mixture::component_log_densities;
use veto_core::{derive_seed, Dataset, FeedbackRecord, FitConfig, FitResult, MixtureParams, SoftClustering};

/// Bumped whenever the document layout changes incompatibly.
pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Created,
    Fitting,
    AwaitingFeedback,
    Stable,
    Failed,
}

impl SessionStatus {
    pub fn label(self) -> &'static str {
        match self {
            SessionStatus::Created => "CREATED",
            SessionStatus::Fitting => "FITTING",
            SessionStatus::AwaitingFeedback => "AWAITING_FEEDBACK",
            SessionStatus::Stable => "STABLE",
            SessionStatus::Failed => "FAILED",
        }
    }

    /// Whether `self -> next` is an edge of the lifecycle graph.
    pub fn can_become(self, next: SessionStatus) -> bool {
        use SessionStatus::*;
        matches!(
            (self, next),
            (Created, Fitting)
                | (Fitting, AwaitingFeedback)
                | (Fitting, Failed)
                | (AwaitingFeedback, Fitting)
                | (AwaitingFeedback, Stable)
        )
    }
}

impl fmt::Display for SessionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SessionError {
    WrongState { op: &'static str, status: SessionStatus, reason: String },
    Invalid(String),
}

impl fmt::Display for SessionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SessionError::WrongState { op, status, reason } => {
                write!(f, "cannot {op} while session is {status}: {reason}")
            }
            SessionError::Invalid(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for SessionError {}

/// Optimizer diagnostics kept alongside each clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub converged: bool,
    pub iterations: usize,
    pub objective: Option<f64>,
    pub kl_residual: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringEntry {
    pub params: MixtureParams,
    pub clustering: SoftClustering,
    pub meta: FitMeta,
}

/// Everything needed to run one refit off the request path.
#[derive(Debug, Clone)]
pub struct FitJob {
    pub k: usize,
    pub history: Vec<FeedbackRecord>,
    pub config: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopMember {
    pub point_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_index: usize,
    pub weight: f64,
    pub size: usize,
    /// Highest `log p(x | h) + log w_h` first.
    pub top_members: Vec<TopMember>,
    pub mean_preview: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub session_id: String,
    pub dataset_ref: String,
    pub k: usize,
    pub config: FitConfig,
    pub history: Vec<FeedbackRecord>,
    pub clusterings: Vec<ClusteringEntry>,
    pub status: SessionStatus,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    pub updated_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Export format and on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionDocument {
    pub version: u32,
    pub session: Session,
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl Session {
    pub fn new(session_id: String, dataset_ref: String, k: usize, config: FitConfig) -> Result<Self, SessionError> {
        if k == 0 {
            return Err(SessionError::Invalid("k must be at least 1".into()));
        }
        config.validate().map_err(|e| SessionError::Invalid(e.to_string()))?;
        let now = now_millis();
        Ok(Session {
            session_id,
            dataset_ref,
            k,
            config,
            history: Vec::new(),
            clusterings: Vec::new(),
            status: SessionStatus::Created,
            created_at: now,
            updated_at: now,
            error: None,
        })
    }

    fn wrong(&self, op: &'static str, reason: impl Into<String>) -> SessionError {
        SessionError::WrongState {
            op,
            status: self.status,
            reason: reason.into(),
        }
    }

    fn transition(&mut self, next: SessionStatus) {
        debug_assert!(self.status.can_become(next), "{} -> {}", self.status, next);
        self.status = next;
        self.updated_at = now_millis().max(self.updated_at);
    }

    pub fn latest(&self) -> Option<&ClusteringEntry> {
        self.clusterings.last()
    }

    /// True once feedback on the latest clustering has been recorded.
    pub fn feedback_recorded(&self) -> bool {
        !self.clusterings.is_empty() && self.history.len() == self.clusterings.len()
    }

    /// Seed for the fit that will produce clustering number `round`.
    pub fn round_seed(&self, round: usize) -> u64 {
        derive_seed(self.config.seed, round as u64)
    }

    /// Moves to FITTING and hands back the inputs of the refit.
    pub fn begin_fit(&mut self) -> Result<FitJob, SessionError> {
        match self.status {
            SessionStatus::Created => {}
            SessionStatus::AwaitingFeedback if self.feedback_recorded() => {}
            SessionStatus::AwaitingFeedback => {
                return Err(self.wrong("start a fit", "submit feedback on the current clustering first"))
            }
            SessionStatus::Fitting => return Err(self.wrong("start a fit", "a fit is already running")),
            SessionStatus::Stable => return Err(self.wrong("start a fit", "every cluster was accepted")),
            SessionStatus::Failed => return Err(self.wrong("start a fit", "the session has failed")),
        }
        let round = self.clusterings.len();
        let job = FitJob {
            k: self.k,
            history: self.history.clone(),
            config: FitConfig {
                seed: self.round_seed(round),
                ..self.config
            },
        };
        self.error = None;
        self.transition(SessionStatus::Fitting);
        Ok(job)
    }

    /// Records a finished fit. Non-convergence is kept as metadata; cancellation fails the session.
    pub fn complete_fit(&mut self, result: FitResult, seed: u64) -> Result<(), SessionError> {
        if self.status != SessionStatus::Fitting {
            return Err(self.wrong("complete a fit", "no fit is running"));
        }
        if result.cancelled {
            self.fail_fit("fit cancelled");
            return Ok(());
        }
        if result.clustering.k() != self.k {
            self.fail_fit(format!("fit returned {} clusters, expected {}", result.clustering.k(), self.k));
            return Ok(());
        }
        let meta = FitMeta {
            converged: result.converged,
            iterations: result.iterations,
            objective: result.final_objective().and_then(finite),
            kl_residual: finite(result.kl_residual),
            alpha: result.alpha,
            beta: result.beta,
            seed,
        };
        self.clusterings.push(ClusteringEntry {
            params: result.params,
            clustering: result.clustering,
            meta,
        });
        self.transition(SessionStatus::AwaitingFeedback);
        Ok(())
    }

    pub fn fail_fit(&mut self, message: impl Into<String>) {
        if self.status == SessionStatus::Fitting {
            self.error = Some(message.into());
            self.transition(SessionStatus::Failed);
        }
    }

    /// Freezes the latest clustering into a feedback record.
    pub fn submit_feedback(&mut self, accepted: BTreeSet<usize>, rejected: BTreeSet<usize>) -> Result<(), SessionError> {
        if self.status != SessionStatus::AwaitingFeedback {
            return Err(self.wrong("submit feedback", "no clustering is awaiting feedback"));
        }
        if self.feedback_recorded() {
            return Err(self.wrong("submit feedback", "feedback on the current clustering is already recorded"));
        }
        let entry = self.clusterings.last().expect("awaiting feedback implies a clustering");
        let iteration = self.clusterings.len() - 1;
        let record = FeedbackRecord::new(iteration, accepted, rejected, entry.clustering.resp().clone())
            .map_err(|e| SessionError::Invalid(e.to_string()))?;
        let all_accepted = record.accepted().len() == entry.clustering.k();
        self.history.push(record);
        if all_accepted {
            self.transition(SessionStatus::Stable);
        } else {
            self.updated_at = now_millis().max(self.updated_at);
        }
        Ok(())
    }

    /// Summaries of the latest clustering with at most `m` top members each.
    pub fn summaries(&self, data: &Dataset, m: usize) -> Result<Vec<ClusterSummary>, SessionError> {
        if !matches!(self.status, SessionStatus::AwaitingFeedback | SessionStatus::Stable) {
            return Err(self.wrong("list clusters", "no finished clustering"));
        }
        if m == 0 {
            return Err(SessionError::Invalid("m must be at least 1".into()));
        }
        let entry = self.latest().expect("finished states have a clustering");
        cluster_summaries(&entry.params, &entry.clustering, data, m).map_err(|e| SessionError::Invalid(e.to_string()))
    }

    /// Structural checks for imported documents.
    pub fn validate(&self, data: &Dataset) -> Result<(), String> {
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        self.config.validate().map_err(|e| format!("config: {e}"))?;
        if self.history.len() > self.clusterings.len() {
            return Err("history is longer than the list of clusterings".into());
        }
        for (i, c) in self.clusterings.iter().enumerate() {
            if c.clustering.n() != data.n() || c.clustering.k() != self.k {
                return Err(format!(
                    "clusterings[{i}] is {}x{}, expected {}x{}",
                    c.clustering.n(),
                    c.clustering.k(),
                    data.n(),
                    self.k
                ));
            }
            if c.params.means().dim() != (self.k, data.dim()) {
                return Err(format!("clusterings[{i}].params does not match k and the dataset dimension"));
            }
        }
        for (i, r) in self.history.iter().enumerate() {
            if r.iteration() != i {
                return Err(format!("history[{i}].iteration is {}", r.iteration()));
            }
            if r.past_resp() != self.clusterings[i].clustering.resp() {
                return Err(format!("history[{i}].past_resp differs from clusterings[{i}]"));
            }
        }
        let expected_ok = match self.status {
            SessionStatus::Created => self.clusterings.is_empty() && self.history.is_empty(),
            SessionStatus::Fitting | SessionStatus::Failed => true,
            SessionStatus::AwaitingFeedback => !self.clusterings.is_empty(),
            SessionStatus::Stable => {
                self.feedback_recorded() && self.history.last().is_some_and(|r| r.accepted().len() == self.k)
            }
        };
        if !expected_ok {
            return Err(format!("status {} is inconsistent with the recorded clusterings", self.status));
        }
        Ok(())
    }

    /// A session loaded from disk or an import cannot still have a fit running.
    pub fn recover_interrupted(&mut self) {
        if self.status == SessionStatus::Fitting {
            self.fail_fit("fit interrupted");
        }
    }
}

/// Top members per cluster among the points hard-assigned to it.
pub fn cluster_summaries(
    params: &MixtureParams,
    clustering: &SoftClustering,
    data: &Dataset,
    m: usize,
) -> veto_core::Result<Vec<ClusterSummary>> {
    let dens = component_log_densities(params, data)?;
    let hard = hard_assign(clustering);
    let k = clustering.k();
    let mut members: Vec<Vec<(usize, f64)>> = vec![Vec::new(); k];
    for (j, &h) in hard.labels().iter().enumerate() {
        members[h].push((j, dens[[j, h]] + params.weights()[h].ln()));
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(h, mut pts)| {
            let size = pts.len();
            pts.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            pts.truncate(m);
            ClusterSummary {
                cluster_index: h,
                weight: params.weights()[h],
                size,
                top_members: pts
                    .into_iter()
                    .map(|(j, score)| TopMember {
                        point_id: data.point_ids()[j].clone(),
                        score,
                    })
                    .collect(),
                mean_preview: params.means().row(h).to_vec(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use veto_core::synth;

    fn fitted() -> (Dataset, Session) {
        let data = synth::four_gaussians(80, 3.0, 1).unwrap();
        let mut s = Session::new("s".into(), "d".into(), 2, FitConfig::default()).unwrap();
        let job = s.begin_fit().unwrap();
        let res = veto_core::fit_with_feedback(&data, job.k, &job.history, &job.config).unwrap();
        s.complete_fit(res, job.config.seed).unwrap();
        (data, s)
    }

    #[test]
    fn lifecycle() {
        let (_, mut s) = fitted();
        assert_eq!(s.status, SessionStatus::AwaitingFeedback);
        assert!(matches!(s.begin_fit(), Err(SessionError::WrongState { .. })));
        s.submit_feedback(BTreeSet::new(), [0, 1].into()).unwrap();
        assert!(s.submit_feedback(BTreeSet::new(), BTreeSet::new()).is_err());
        let job = s.begin_fit().unwrap();
        assert_eq!(job.history.len(), 1);
        assert_eq!(s.status, SessionStatus::Fitting);
        s.fail_fit("boom");
        assert_eq!(s.status, SessionStatus::Failed);
        assert!(s.begin_fit().is_err());
    }

    #[test]
    fn accepting_everything_stabilizes() {
        let (_, mut s) = fitted();
        s.submit_feedback([0, 1].into(), BTreeSet::new()).unwrap();
        assert_eq!(s.status, SessionStatus::Stable);
    }

    #[test]
    fn feedback_validation() {
        let (_, mut s) = fitted();
        assert!(matches!(s.submit_feedback([0].into(), [0].into()), Err(SessionError::Invalid(_))));
        assert!(matches!(s.submit_feedback([5].into(), BTreeSet::new()), Err(SessionError::Invalid(_))));
        assert!(s.history.is_empty());
    }

    #[test]
    fn record_freezes_the_judged_responsibilities() {
        let (_, mut s) = fitted();
        s.submit_feedback(BTreeSet::new(), BTreeSet::new()).unwrap();
        assert_eq!(s.history[0].past_resp(), s.clusterings[0].clustering.resp());
    }

    #[test]
    fn summaries_match_density_oracle() {
        let (data, s) = fitted();
        let entry = s.latest().unwrap();
        let sums = s.summaries(&data, 6).unwrap();
        let dens = component_log_densities(&entry.params, &data).unwrap();
        let labels = hard_assign(&entry.clustering);
        for sum in &sums {
            let h = sum.cluster_index;
            let mut oracle: Vec<f64> = (0..data.n())
                .filter(|&j| labels.labels()[j] == h)
                .map(|j| dens[[j, h]] + entry.params.weights()[h].ln())
                .collect();
            oracle.sort_by(|a, b| b.total_cmp(a));
            oracle.truncate(6);
            let got: Vec<f64> = sum.top_members.iter().map(|t| t.score).collect();
            assert_eq!(got, oracle);
        }
        let all = s.summaries(&data, 1000).unwrap();
        assert_eq!(all.iter().map(|c| c.top_members.len()).sum::<usize>(), data.n());
        assert!(s.summaries(&data, 0).is_err());
    }

    #[test]
    fn zero_k_rejected() {
        assert!(Session::new("s".into(), "d".into(), 0, FitConfig::default()).is_err());
    }
}
