//! Feature CSV reading and writing.
//!
//! Gallery files carry `subject_id,media_id,f0,...,f{d-1}`; probe files add a
//! `truth` column holding a gallery subject id or `NONMATED`. Values are
//! written with Rust's shortest round-trip float formatting.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::embedding::{Embedding, Gallery, Probe, ProbeSet, Truth};
use crate::error::{Error, Result};

struct Layout {
    truth: Option<usize>,
    features: Vec<usize>,
}

fn parse_error(line: u64, column: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        column,
        message: message.into(),
    }
}

fn layout(headers: &csv::StringRecord, probe: bool) -> Result<Layout> {
    let names: Vec<&str> = headers.iter().collect();
    if names.first() != Some(&"subject_id") {
        return Err(parse_error(1, 1, "first column must be subject_id"));
    }
    if names.get(1) != Some(&"media_id") {
        return Err(parse_error(1, 2, "second column must be media_id"));
    }
    let truth = names.iter().position(|n| *n == "truth");
    if probe && truth.is_none() {
        return Err(parse_error(1, names.len() + 1, "probe file needs a truth column"));
    }
    let features: Vec<usize> = (2..names.len()).filter(|&i| Some(i) != truth).collect();
    for (k, &i) in features.iter().enumerate() {
        if names[i] != format!("f{k}") {
            return Err(parse_error(1, i + 1, format!("expected header f{k}, found {:?}", names[i])));
        }
    }
    if features.is_empty() {
        return Err(parse_error(1, names.len() + 1, "no feature columns"));
    }
    Ok(Layout { truth, features })
}

struct Row {
    subject_id: String,
    media_id: String,
    truth: Option<Truth>,
    embedding: Embedding,
}

fn read_rows(reader: impl Read, probe: bool) -> Result<Vec<Row>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| parse_error(1, 1, e.to_string()))?
        .clone();
    let layout = layout(&headers, probe)?;
    let width = headers.len();
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let more = rdr.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, 1, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(parse_error(
                line,
                record.len().min(width) + 1,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        let mut raw = Vec::with_capacity(layout.features.len());
        for &i in &layout.features {
            let v: f64 = record[i]
                .trim()
                .parse()
                .map_err(|_| parse_error(line, i + 1, format!("invalid number {:?}", &record[i])))?;
            raw.push(v);
        }
        let subject_id = record[0].to_owned();
        let media_id = record[1].to_owned();
        let embedding = Embedding::new(subject_id.clone(), media_id.clone(), &raw).map_err(|e| match e {
            Error::NonFinite { index } => parse_error(line, layout.features[index] + 1, "non-finite value"),
            Error::ZeroNorm { .. } => parse_error(line, 3, "zero-norm feature vector"),
            other => other,
        })?;
        let truth = layout.truth.map(|i| Truth::parse(&record[i]));
        rows.push(Row {
            subject_id,
            media_id,
            truth,
            embedding,
        });
    }
    Ok(rows)
}

pub fn read_gallery(reader: impl Read) -> Result<Gallery> {
    let rows = read_rows(reader, false)?;
    Gallery::from_embeddings(rows.into_iter().map(|r| r.embedding).collect())
}

/// Probe ids are `subject_id/media_id`.
pub fn read_probes(reader: impl Read) -> Result<ProbeSet> {
    let rows = read_rows(reader, true)?;
    let mut seen = HashSet::new();
    let mut probes = Vec::with_capacity(rows.len());
    for r in rows {
        if !seen.insert((r.subject_id.clone(), r.media_id.clone())) {
            return Err(Error::DuplicateMediaId {
                subject_id: r.subject_id,
                media_id: r.media_id,
            });
        }
        probes.push(Probe {
            id: format!("{}/{}", r.subject_id, r.media_id),
            embedding: r.embedding,
            truth: r.truth.expect("probe layout has a truth column"),
        });
    }
    ProbeSet::new(probes)
}

pub fn load_gallery(path: &Path) -> Result<Gallery> {
    read_gallery(std::fs::File::open(path)?)
}

pub fn load_probes(path: &Path) -> Result<ProbeSet> {
    read_probes(std::fs::File::open(path)?)
}

fn header(dim: usize, truth: bool) -> Vec<String> {
    let mut h = vec!["subject_id".to_owned(), "media_id".to_owned()];
    if truth {
        h.push("truth".to_owned());
    }
    h.extend((0..dim).map(|k| format!("f{k}")));
    h
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_gallery(gallery: &Gallery, writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header(gallery.dim(), false)).map_err(csv_error)?;
    for s in gallery.subjects() {
        for m in &s.media {
            let mut rec = vec![s.id.clone(), m.media_id.clone()];
            rec.extend(m.vector().iter().map(|x| x.to_string()));
            w.write_record(&rec).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_probes(probes: &ProbeSet, writer: impl Write) -> Result<()> {
    let dim = probes.probes().first().map_or(0, |p| p.embedding.dim());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header(dim, true)).map_err(csv_error)?;
    for p in probes {
        let mut rec = vec![
            p.embedding.subject_id.clone(),
            p.embedding.media_id.clone(),
            p.truth.to_string(),
        ];
        rec.extend(p.embedding.vector().iter().map(|x| x.to_string()));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_a_small_gallery() {
        let csv = "subject_id,media_id,f0,f1\na,1,3,4\na,2,1,0\nb,1,0,2\n";
        let g = read_gallery(csv.as_bytes()).unwrap();
        assert_eq!(g.num_subjects(), 2);
        assert_eq!(g.total_media(), 3);
        assert_eq!(g.medium(0), &[0.6, 0.8]);
        assert_eq!(g.medium(2), &[0.0, 1.0]);
    }

    #[test]
    fn short_row_names_its_line() {
        let csv = "subject_id,media_id,f0,f1\na,1,3,4\na,2,1\n";
        match read_gallery(csv.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_number_names_line_and_column() {
        let csv = "subject_id,media_id,f0,f1\na,1,3,x4\n";
        match read_gallery(csv.as_bytes()) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_media_and_zero_norm_are_rejected() {
        let dup = "subject_id,media_id,f0\na,1,3\na,1,4\n";
        assert!(matches!(read_gallery(dup.as_bytes()), Err(Error::DuplicateMediaId { .. })));
        let zero = "subject_id,media_id,f0,f1\na,1,0,0\n";
        assert!(matches!(read_gallery(zero.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn probes_need_truth_and_parse_nonmated() {
        let csv = "subject_id,media_id,truth,f0,f1\na,p1,a,1,0\nz,p1,NONMATED,0,1\n";
        let p = read_probes(csv.as_bytes()).unwrap();
        assert_eq!(p.probes()[0].truth, Truth::Mated("a".into()));
        assert_eq!(p.probes()[1].truth, Truth::NonMated);
        assert_eq!(p.probes()[1].id, "z/p1");
        let no_truth = "subject_id,media_id,f0\na,p1,1\n";
        assert!(matches!(read_probes(no_truth.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn written_values_round_trip() {
        let csv = "subject_id,media_id,f0,f1,f2\na,1,0.1,0.7,-0.3\nb,1,1e-3,2,3\n";
        let g = read_gallery(csv.as_bytes()).unwrap();
        let mut out = Vec::new();
        write_gallery(&g, &mut out).unwrap();
        let text = String::from_utf8(out.clone()).unwrap();
        assert!(text.starts_with("subject_id,media_id,f0,f1,f2\n"));
        assert!(!text.contains('\r'));
        let back = read_gallery(out.as_slice()).unwrap();
        for i in 0..g.total_media() {
            for (a, b) in g.medium(i).iter().zip(back.medium(i)) {
                assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
