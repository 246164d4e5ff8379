//! Columnar CSV export/import of client datasets.
//!
//! Columns: `client_id,round,group,label,response,x0,x1,...`. Missing labels
//! and responses are empty cells.

use std::io::{Read, Write};

use super::dataset::{ClientDataset, Observation};
use crate::error::{BcflError, Result};

fn csv_err(e: csv::Error) -> BcflError {
    BcflError::Io(e.to_string())
}

pub fn write_datasets<W: Write>(out: W, datasets: &[ClientDataset]) -> Result<()> {
    let dim = datasets
        .iter()
        .flat_map(|d| d.observations.first())
        .map(|o| o.features.len())
        .next()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["client_id", "round", "group", "label", "response"].map(String::from).to_vec();
    header.extend((0..dim).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for d in datasets {
        for o in &d.observations {
            if o.features.len() != dim {
                return Err(BcflError::contract("datasets mix feature dimensions"));
            }
            let mut rec = vec![
                d.client_id.to_string(),
                d.round.to_string(),
                d.true_group.to_string(),
                o.label.map(|l| l.to_string()).unwrap_or_default(),
                o.response.map(|r| r.to_string()).unwrap_or_default(),
            ];
            rec.extend(o.features.iter().map(f64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads datasets back, grouping consecutive rows by `(client_id, round)`.
pub fn read_datasets<R: Read>(input: R) -> Result<Vec<ClientDataset>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out: Vec<ClientDataset> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |what: &str| BcflError::Io(format!("row {}: bad {what}", line + 1));
        if rec.len() < 5 {
            return Err(bad("column count"));
        }
        let int = |k: usize, what: &str| rec[k].parse::<usize>().map_err(|_| bad(what));
        let client = int(0, "client_id")?;
        let round = int(1, "round")?;
        let group = int(2, "group")?;
        let label = if rec[3].is_empty() { None } else { Some(int(3, "label")?) };
        let response = if rec[4].is_empty() {
            None
        } else {
            Some(rec[4].parse::<f64>().map_err(|_| bad("response"))?)
        };
        let features = (5..rec.len())
            .map(|k| rec[k].parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<Vec<_>>>()?;
        let obs = Observation { features, label, response };
        match out.last_mut() {
            Some(d) if d.client_id == client && d.round == round => d.observations.push(obs),
            _ => out.push(ClientDataset::new(client, round, group, vec![obs])),
        }
    }
    Ok(out)
}
