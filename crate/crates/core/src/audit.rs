//! Keyword audits over stored description tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::describe::DescriptionRow;
use crate::error::{Error, Result};
use crate::keywords::KeywordSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMatch {
    pub model_id: String,
    pub layer_id: String,
    pub unit: usize,
    pub description: String,
    pub matched: Vec<String>,
    /// Exemplar directory relative to the exemplar root.
    pub exemplar_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub model_id: String,
    pub keywords: Vec<String>,
    pub units_examined: usize,
    pub matches: Vec<AuditMatch>,
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

/// Rows whose description contains a keyword token, sorted by layer then unit.
pub fn audit_model(rows: &[DescriptionRow], keywords: &KeywordSet) -> AuditReport {
    let models: BTreeSet<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
    let mut matches: Vec<AuditMatch> = rows
        .iter()
        .filter_map(|r| {
            let matched = keywords.matched(&r.description);
            (!matched.is_empty()).then(|| AuditMatch {
                model_id: r.model_id.clone(),
                layer_id: r.layer_id.clone(),
                unit: r.unit,
                description: r.description.clone(),
                matched,
                exemplar_ref: format!("{}/{}/{}", r.model_id, r.layer_id, r.neuron().unit_dir()),
            })
        })
        .collect();
    matches.sort_by(|a, b| (&a.model_id, &a.layer_id, a.unit).cmp(&(&b.model_id, &b.layer_id, b.unit)));
    let mut counts: BTreeMap<String, usize> = keywords.keywords().iter().map(|k| (k.clone(), 0)).collect();
    for m in &matches {
        for k in &m.matched {
            *counts.get_mut(k).expect("matched keywords come from the set") += 1;
        }
    }
    AuditReport {
        model_id: models.into_iter().collect::<Vec<_>>().join(","),
        keywords: keywords.keywords().to_vec(),
        units_examined: rows.len(),
        total: matches.len(),
        matches,
        counts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDelta {
    pub model_a: String,
    pub model_b: String,
    /// Count in `b` minus count in `a`.
    pub per_keyword: BTreeMap<String, i64>,
    pub total: i64,
}

pub fn compare_audits(a: &AuditReport, b: &AuditReport) -> Result<AuditDelta> {
    if a.keywords != b.keywords {
        return Err(Error::Argument(format!(
            "keyword sets differ: {:?} vs {:?}",
            a.keywords, b.keywords
        )));
    }
    Ok(AuditDelta {
        model_a: a.model_id.clone(),
        model_b: b.model_id.clone(),
        per_keyword: a
            .keywords
            .iter()
            .map(|k| (k.clone(), b.counts[k] as i64 - a.counts[k] as i64))
            .collect(),
        total: b.total as i64 - a.total as i64,
    })
}

/// Model id with a trailing `-blurred` / `_blurred` marker removed.
pub fn pair_key(model_id: &str) -> &str {
    model_id
        .strip_suffix("-blurred")
        .or_else(|| model_id.strip_suffix("_blurred"))
        .unwrap_or(model_id)
}

/// Deltas from each base model to its `-blurred` partner, for every complete pair.
pub fn compare_paired(reports: &[AuditReport]) -> Result<Vec<AuditDelta>> {
    let mut out = Vec::new();
    for b in reports.iter().filter(|r| pair_key(&r.model_id) != r.model_id) {
        if let Some(a) = reports.iter().find(|r| r.model_id == pair_key(&b.model_id)) {
            out.push(compare_audits(a, b)?);
        }
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Static review page; thumbnails link to `{exemplar_base}/{exemplar_ref}/image_00.png` etc.
pub fn render_html(report: &AuditReport, exemplar_base: &str, thumbnails: usize) -> String {
    let mut h = String::new();
    let _ = write!(
        h,
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Audit {m}</title>\
         <style>body{{font-family:sans-serif}}td{{vertical-align:top;padding:4px}}img{{width:64px;image-rendering:pixelated}}</style>\
         </head><body>\n<h1>Audit: {m}</h1>\n<p>Keywords: {k}. Units examined: {n}. Matches: {t}.</p>\n<table>\n",
        m = escape(&report.model_id),
        k = escape(&report.keywords.join(", ")),
        n = report.units_examined,
        t = report.total
    );
    for (k, c) in &report.counts {
        let _ = writeln!(h, "<tr><td>{}</td><td>{c}</td></tr>", escape(k));
    }
    h.push_str("</table>\n<table>\n<tr><th>unit</th><th>description</th><th>exemplars</th></tr>\n");
    for m in &report.matches {
        let _ = write!(
            h,
            "<tr><td>{}/{}/{}</td><td>{}</td><td>",
            escape(&m.model_id),
            escape(&m.layer_id),
            m.unit,
            escape(&m.description)
        );
        for j in 0..thumbnails {
            let _ = write!(h, "<img src=\"{}/{}/image_{j:02}.png\" alt=\"\">", escape(exemplar_base), escape(&m.exemplar_ref));
        }
        h.push_str("</td></tr>\n");
    }
    h.push_str("</table>\n</body></html>\n");
    h
}

/// `audit.json` and `audit.html` under `dir`.
pub fn write_audit(report: &AuditReport, dir: &Path, exemplar_base: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let j = dir.join("audit.json");
    fs::write(&j, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(&j, e))?;
    let p = dir.join("audit.html");
    fs::write(&p, render_html(report, exemplar_base, 5)).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, layer: &str, unit: usize, d: &str) -> DescriptionRow {
        DescriptionRow {
            model_id: model.into(),
            layer_id: layer.into(),
            unit,
            description: d.into(),
            logp_cond: 0.0,
            logp_lm: 0.0,
            wpmi: 0.0,
            runner_ups: vec![],
        }
    }

    #[test]
    fn matches_sorted_and_counted() {
        let rows = vec![
            row("m", "layer2", 1, "human faces in crowds"),
            row("m", "layer1", 7, "headphones on desks"),
            row("m", "layer1", 3, "eyes and mouth"),
            row("m", "layer1", 0, "dogs"),
        ];
        let r = audit_model(&rows, &KeywordSet::faces());
        let ids: Vec<(String, usize)> = r.matches.iter().map(|m| (m.layer_id.clone(), m.unit)).collect();
        assert_eq!(ids, vec![("layer1".into(), 3), ("layer2".into(), 1)]);
        assert_eq!(r.counts["face"], 1);
        assert_eq!(r.counts["mouth"], 1);
        assert_eq!(r.counts["head"], 0);
        assert_eq!(r.total, 2);
        assert_eq!(r.matches[0].exemplar_ref, "m/layer1/unit_0003");
        assert_eq!(audit_model(&rows, &KeywordSet::faces()), r);
        let html = render_html(&r, "ex", 2);
        assert!(html.contains("ex/m/layer1/unit_0003/image_01.png"));
    }

    #[test]
    fn deltas() {
        let a = audit_model(&[row("net", "l", 0, "faces"), row("net", "l", 1, "a nose")], &KeywordSet::faces());
        let b = audit_model(&[row("net-blurred", "l", 0, "dogs")], &KeywordSet::faces());
        let d = compare_audits(&a, &a).unwrap();
        assert!(d.per_keyword.values().all(|v| *v == 0) && d.total == 0);
        let d = compare_audits(&a, &b).unwrap();
        assert_eq!(d.total, -2);
        assert_eq!(d.per_keyword["face"], -1);
        let d = compare_audits(&b, &a).unwrap();
        assert_eq!(d.total, 2);
        let paired = compare_paired(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(paired.len(), 1);
        assert_eq!(paired[0].model_b, "net-blurred");
        let t = audit_model(&[], &KeywordSet::text());
        assert!(matches!(compare_audits(&a, &t), Err(Error::Argument(_))));
    }
}
