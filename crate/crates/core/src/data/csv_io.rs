// Long-format CSV: instance_id, t, c0..c{C-1}, optional `label` or `anomaly`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Dataset, Labels};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Row {
    t: usize,
    values: Vec<f64>,
    tag: Option<i64>,
}

fn parse_value(s: &str) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    s.parse::<f64>().map_err(|_| Error::Format(format!("cannot parse value '{s}'")))
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let id_col = col("instance_id").ok_or_else(|| Error::Format("missing 'instance_id' column".into()))?;
    let t_col = col("t").ok_or_else(|| Error::Format("missing 't' column".into()))?;
    let mut chan_cols = Vec::new();
    while let Some(i) = col(&format!("c{}", chan_cols.len())) {
        chan_cols.push(i);
    }
    if chan_cols.is_empty() {
        return Err(Error::Format("no channel columns c0..".into()));
    }
    let label_col = col("label");
    let anomaly_col = col("anomaly");
    if label_col.is_some() && anomaly_col.is_some() {
        return Err(Error::Format("both 'label' and 'anomaly' columns present".into()));
    }
    let tag_col = label_col.or(anomaly_col);

    let mut series: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let id: i64 = field(id_col)
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad instance_id '{}'", line + 2, field(id_col))))?;
        let t: usize = field(t_col)
            .parse()
            .map_err(|_| Error::Format(format!("row {}: bad t '{}'", line + 2, field(t_col))))?;
        let values = chan_cols.iter().map(|&i| parse_value(field(i))).collect::<Result<Vec<_>>>()?;
        let tag = match tag_col {
            Some(i) => Some(
                field(i)
                    .parse::<i64>()
                    .map_err(|_| Error::Format(format!("row {}: bad label '{}'", line + 2, field(i))))?,
            ),
            None => None,
        };
        series.entry(id).or_default().push(Row { t, values, tag });
    }
    if series.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }

    let c = chan_cols.len();
    let mut len = None;
    let mut data = Vec::new();
    let mut missing = Vec::new();
    let mut inst_labels = Vec::new();
    let mut step_labels = Vec::new();
    for (id, mut rows) in series {
        rows.sort_by_key(|r| r.t);
        if rows.iter().enumerate().any(|(k, r)| r.t != k) {
            return Err(Error::Format(format!("instance {id}: timesteps are not 0..{}", rows.len())));
        }
        match len {
            None => len = Some(rows.len()),
            Some(l) if l != rows.len() => {
                return Err(Error::Format(format!("instance {id} has {} steps, expected {l}", rows.len())))
            }
            _ => {}
        }
        if label_col.is_some() {
            let first = rows[0].tag;
            if rows.iter().any(|r| r.tag != first) {
                return Err(Error::Format(format!("instance {id}: label varies over time")));
            }
            inst_labels.push(first.expect("label column present"));
        }
        for r in &rows {
            let miss = r.values.iter().any(|v| v.is_nan());
            missing.push(miss);
            data.extend(r.values.iter().map(|&v| if miss { 0.0 } else { v }));
            if anomaly_col.is_some() {
                match r.tag {
                    Some(0) => step_labels.push(false),
                    Some(1) => step_labels.push(true),
                    other => return Err(Error::Format(format!("instance {id}: anomaly flag {other:?}"))),
                }
            }
        }
    }
    let n = missing.len() / len.unwrap_or(1);
    let labels = if label_col.is_some() {
        Some(Labels::Instance(inst_labels))
    } else if anomaly_col.is_some() {
        Some(Labels::Timestep(step_labels))
    } else {
        None
    };
    Dataset::new(Tensor::new(vec![n, len.unwrap_or(0), c], data)?, Some(missing), labels)
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (n, t, c) = (ds.n(), ds.t(), ds.c());
    let mut header: Vec<String> = vec!["instance_id".into(), "t".into()];
    header.extend((0..c).map(|i| format!("c{i}")));
    match &ds.labels {
        Some(Labels::Instance(_)) => header.push("label".into()),
        Some(Labels::Timestep(_)) => header.push("anomaly".into()),
        None => {}
    }
    w.write_record(&header)?;
    let v = ds.values.data();
    for i in 0..n {
        for s in 0..t {
            let k = i * t + s;
            let mut rec = vec![i.to_string(), s.to_string()];
            for ch in 0..c {
                rec.push(if ds.missing[k] { "NaN".into() } else { v[k * c + ch].to_string() });
            }
            match &ds.labels {
                Some(Labels::Instance(l)) => rec.push(l[i].to_string()),
                Some(Labels::Timestep(l)) => rec.push(u8::from(l[k]).to_string()),
                None => {}
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
