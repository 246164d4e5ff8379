use serde::{Deserialize, Serialize};

/// One sample held by a client. `label` is used by classification models,
/// `response` by the linear-regression model; the Gaussian-mean model reads
/// only the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<f64>,
}

impl Observation {
    pub fn point(features: Vec<f64>) -> Self {
        Observation { features, label: None, response: None }
    }

    pub fn labeled(features: Vec<f64>, label: usize) -> Self {
        Observation { features, label: Some(label), response: None }
    }

    pub fn regression(features: Vec<f64>, response: f64) -> Self {
        Observation { features, label: None, response: Some(response) }
    }
}

/// The data a client contributes in one communication round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub round: usize,
    pub observations: Vec<Observation>,
    /// Generating group, used only for evaluation.
    pub true_group: usize,
}

impl ClientDataset {
    pub fn new(client_id: usize, round: usize, true_group: usize, observations: Vec<Observation>) -> Self {
        ClientDataset { client_id, round, observations, true_group }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Concatenates the observations of several datasets, keeping the
    /// identity fields of the first.
    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a ClientDataset>) -> ClientDataset {
        let mut iter = parts.into_iter();
        let mut out = match iter.next() {
            Some(first) => first.clone(),
            None => return ClientDataset::new(0, 0, 0, Vec::new()),
        };
        for d in iter {
            out.observations.extend(d.observations.iter().cloned());
        }
        out
    }
}
