use clap::ValueEnum;
use serde::Serialize;

use otq::quality::CorpusReport;
use otq::OtqScores;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

const SCORE_COLUMNS: [&str; 11] = [
    "otq", "tq", "bq", "mean_nq", "mq", "lq", "tp", "fp", "fn", "n_pairs", "n_consistent",
];

fn score_fields(s: &OtqScores) -> Vec<String> {
    vec![
        s.otq.to_string(),
        s.tq.to_string(),
        s.bq.to_string(),
        s.mean_nq.to_string(),
        s.mq.to_string(),
        s.lq.to_string(),
        s.tp.to_string(),
        s.fp.to_string(),
        s.fn_.to_string(),
        s.n_pairs.to_string(),
        s.n_consistent.to_string(),
    ]
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("reports serialize");
    out.push(b'\n');
    out
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory writer");
    for r in rows {
        w.write_record(r).expect("in-memory writer");
    }
    w.into_inner().expect("in-memory writer")
}

/// Right-aligned text table; the first column is left-aligned.
pub fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn render_evaluation(rep: &CorpusReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(rep),
        Format::Csv => {
            let mut header = vec!["scope", "image_id"];
            header.extend(SCORE_COLUMNS);
            let mut rows = Vec::with_capacity(rep.images.len() + 1);
            let mut corpus = vec!["corpus".to_string(), String::new()];
            corpus.extend(score_fields(&rep.corpus.scores));
            rows.push(corpus);
            for img in &rep.images {
                let mut r = vec!["image".to_string(), img.image_id.clone()];
                r.extend(score_fields(&img.scores));
                rows.push(r);
            }
            csv_bytes(&header, &rows)
        }
        Format::Table => {
            let header = ["image_id", "OTQ", "TQ", "BQ", "meanNQ", "MQ", "LQ", "TP", "FP", "FN"];
            let row = |id: &str, s: &OtqScores| -> Vec<String> {
                let mut r = vec![id.to_string()];
                r.extend([s.otq, s.tq, s.bq, s.mean_nq, s.mq, s.lq].iter().map(|v| format!("{v:.3}")));
                r.extend([s.tp, s.fp, s.fn_].iter().map(|v| v.to_string()));
                r
            };
            let mut rows: Vec<Vec<String>> = rep.images.iter().map(|i| row(&i.image_id, &i.scores)).collect();
            let c = &rep.corpus;
            rows.push(row(&format!("corpus ({}, {} images)", format!("{:?}", c.pooling).to_lowercase(), c.n_images), &c.scores));
            text_table(&header, &rows).into_bytes()
        }
    }
}

/// One cell of a degradation sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub kind: String,
    pub keep: f64,
    #[serde(flatten)]
    pub scores: OtqScores,
}

pub fn render_sweep(rows: &[SweepRow], format: Format) -> Vec<u8> {
    match format {
        Format::Json => to_json(&rows),
        Format::Csv => {
            let mut header = vec!["kind", "keep"];
            header.extend(SCORE_COLUMNS);
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let mut v = vec![r.kind.clone(), r.keep.to_string()];
                    v.extend(score_fields(&r.scores));
                    v
                })
                .collect();
            csv_bytes(&header, &body)
        }
        Format::Table => {
            let header = ["degradation", "keep", "OTQ", "TQ", "meanNQ", "MQ", "LQ"];
            let body: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    let s = &r.scores;
                    let mut v = vec![r.kind.clone(), format!("{:.0}", r.keep * 100.0)];
                    v.extend([s.otq, s.tq, s.mean_nq, s.mq, s.lq].iter().map(|x| format!("{x:.3}")));
                    v
                })
                .collect();
            text_table(&header, &body).into_bytes()
        }
    }
}
