use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde::Serialize;

use dst_core::evaluator::{aggregate_seeds, find_records, MeanStd, ResultRecord, SeedSummary};
use dst_core::schema::Domain;
use dst_core::Error;

use crate::commands::write_if_changed;

pub const SUMMARY_MARKDOWN: &str = "summary.md";
pub const SUMMARY_JSON: &str = "summary.json";
pub const FIGURE_DATA: &str = "figure_data.json";

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory searched recursively for `result.json` records.
    #[arg(long)]
    pub records: PathBuf,
    /// Where the tables and charts go; defaults to the records directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One table row: a protocol and description variant, averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub label: String,
    pub cells: BTreeMap<Domain, MeanStd>,
    /// Unweighted mean of the domain means; present only when every column is filled.
    pub average: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub columns: Vec<Domain>,
    pub rows: Vec<SummaryRow>,
    /// domain -> row label -> slot -> accuracy across seeds.
    pub slot_accuracy: BTreeMap<Domain, BTreeMap<String, BTreeMap<String, MeanStd>>>,
}

fn row_label(record: &ResultRecord) -> String {
    format!("{} {}", record.protocol, record.variant)
}

fn slot_domain(slot: &str) -> Option<Domain> {
    slot.split_once('-').and_then(|(d, _)| d.parse().ok())
}

/// Groups records that differ only by seed and lays the groups out with
/// domains as columns and (protocol, variant) as rows.
pub fn summarize(records: &[ResultRecord]) -> dst_core::Result<Summary> {
    let mut groups: BTreeMap<String, Vec<ResultRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.config_key().to_string()).or_default().push(r.clone());
    }
    let mut cells: BTreeMap<String, BTreeMap<Domain, (MeanStd, String)>> = BTreeMap::new();
    let mut slots: BTreeMap<Domain, BTreeMap<String, BTreeMap<String, MeanStd>>> = BTreeMap::new();
    for members in groups.values() {
        let summary: SeedSummary = aggregate_seeds(members)?;
        let first = &members[0];
        let label = row_label(first);
        let filled: Vec<(Domain, MeanStd)> = match first.target_domain {
            Some(d) => vec![(d, summary.joint_goal_accuracy)],
            None => summary.per_domain_jga.iter().map(|(d, v)| (*d, *v)).collect(),
        };
        let row = cells.entry(label.clone()).or_default();
        for (domain, value) in filled {
            if let Some((_, other)) = row.insert(domain, (value, first.run_id.clone())) {
                return Err(Error::Contract(format!(
                    "runs {other} and {} both fill `{label}` / {domain}; report them separately",
                    first.run_id
                )));
            }
        }
        for (slot, acc) in &summary.slot_accuracy {
            if let Some(domain) = slot_domain(slot) {
                slots
                    .entry(domain)
                    .or_default()
                    .entry(label.clone())
                    .or_default()
                    .insert(slot.clone(), *acc);
            }
        }
    }
    let columns: Vec<Domain> = cells
        .values()
        .flat_map(|row| row.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows = cells
        .into_iter()
        .map(|(label, row)| {
            let cells: BTreeMap<Domain, MeanStd> = row.into_iter().map(|(d, (v, _))| (d, v)).collect();
            let average = (cells.len() == columns.len())
                .then(|| cells.values().map(|v| v.mean).sum::<f64>() / cells.len() as f64);
            SummaryRow { label, cells, average }
        })
        .collect();
    Ok(Summary {
        columns,
        rows,
        slot_accuracy: slots,
    })
}

fn percent(v: &MeanStd) -> String {
    if v.n > 1 {
        format!("{:.2}±{:.2}", 100.0 * v.mean, 100.0 * v.std)
    } else {
        format!("{:.2}", 100.0 * v.mean)
    }
}

fn capitalized(domain: Domain) -> String {
    let s = domain.as_str();
    s[..1].to_uppercase() + &s[1..]
}

/// Joint goal accuracy in percent: domains as columns, one row per variant,
/// and an unweighted Average column.
pub fn render_markdown(summary: &Summary) -> String {
    let mut out = String::from("| Model |");
    for d in &summary.columns {
        let _ = write!(out, " {} |", capitalized(*d));
    }
    out.push_str(" Average |\n|---|");
    for _ in &summary.columns {
        out.push_str("---:|");
    }
    out.push_str("---:|\n");
    for row in &summary.rows {
        let _ = write!(out, "| {} |", row.label);
        for d in &summary.columns {
            let cell = row.cells.get(d).map_or_else(|| "-".to_string(), percent);
            let _ = write!(out, " {cell} |");
        }
        let avg = row
            .average
            .map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
        let _ = writeln!(out, " {avg} |");
    }
    out
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

/// Grouped bar chart of per-slot accuracy in one domain: one group per slot,
/// one bar per row label, error bars when more than one seed contributed.
pub fn render_chart(domain: Domain, by_label: &BTreeMap<String, BTreeMap<String, MeanStd>>) -> String {
    let labels: Vec<&String> = by_label.keys().collect();
    let slots: Vec<&String> = by_label
        .values()
        .flat_map(|m| m.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let bar = 16.0;
    let gap = 14.0;
    let group = bar * labels.len() as f64 + gap;
    let (left, top, plot_h) = (50.0, 40.0, 220.0);
    let width = left + group * slots.len() as f64 + 20.0 + 190.0;
    let height = top + plot_h + 90.0;
    let y = |v: f64| top + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left:.1}" y="20" font-size="14">Slot accuracy in the {domain} domain</text>"#
    );
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{yy:.1}" x2="{x2:.1}" y2="{yy:.1}" stroke="#dddddd"/><text x="{tx:.1}" y="{ty:.1}" text-anchor="end">{v:.2}</text>"##,
            yy = y(v),
            x2 = left + group * slots.len() as f64,
            tx = left - 4.0,
            ty = y(v) + 4.0,
        );
    }
    for (si, slot) in slots.iter().enumerate() {
        let x0 = left + gap / 2.0 + group * si as f64;
        for (li, label) in labels.iter().enumerate() {
            let Some(v) = by_label[*label].get(*slot) else {
                continue;
            };
            let x = x0 + bar * li as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{yy:.1}" width="{bw:.1}" height="{h:.1}" fill="{c}"><title>{label} {slot}: {m:.4}</title></rect>"#,
                yy = y(v.mean),
                bw = bar - 2.0,
                h = plot_h * v.mean.clamp(0.0, 1.0),
                c = PALETTE[li % PALETTE.len()],
                m = v.mean,
            );
            if v.n > 1 {
                let cx = x + (bar - 2.0) / 2.0;
                let _ = writeln!(
                    s,
                    r#"<line class="err" x1="{cx:.1}" y1="{lo:.1}" x2="{cx:.1}" y2="{hi:.1}" stroke="black"/>"#,
                    lo = y(v.mean - v.std),
                    hi = y(v.mean + v.std),
                );
            }
        }
        let name = slot.split_once('-').map_or(slot.as_str(), |(_, n)| n);
        let lx = x0 + bar * labels.len() as f64 / 2.0;
        let ly = top + plot_h + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-35 {lx:.1} {ly:.1})">{name}</text>"#
        );
    }
    let legend_x = left + group * slots.len() as f64 + 20.0;
    for (li, label) in labels.iter().enumerate() {
        let ly = top + 16.0 * li as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{legend_x:.1}" y="{ry:.1}" width="10" height="10" fill="{c}"/><text x="{tx:.1}" y="{ty:.1}">{label}</text>"#,
            ry = ly,
            c = PALETTE[li % PALETTE.len()],
            tx = legend_x + 14.0,
            ty = ly + 9.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the summary table (Markdown and JSON), the figure data and one
/// chart per domain. Unchanged files are left untouched.
pub fn write_report(records: &[ResultRecord], out: &Path) -> anyhow::Result<Summary> {
    let summary = summarize(records)?;
    let mut files: Vec<(PathBuf, String)> = vec![
        (out.join(SUMMARY_MARKDOWN), render_markdown(&summary)),
        (out.join(SUMMARY_JSON), serde_json::to_string_pretty(&summary)? + "\n"),
        (
            out.join(FIGURE_DATA),
            serde_json::to_string_pretty(&summary.slot_accuracy)? + "\n",
        ),
    ];
    for (domain, by_label) in &summary.slot_accuracy {
        files.push((
            out.join(format!("slot_accuracy_{domain}.svg")),
            render_chart(*domain, by_label),
        ));
    }
    for (path, text) in files {
        if write_if_changed(&path, text.as_bytes()).map_err(Error::from)? {
            info!("wrote {}", path.display());
        }
    }
    Ok(summary)
}

pub fn report(args: &ReportArgs) -> anyhow::Result<u8> {
    let records: Vec<ResultRecord> = find_records(&args.records)?.into_iter().map(|(_, r)| r).collect();
    if records.is_empty() {
        return Err(Error::load(
            &args.records,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no result.json records found"),
        )
        .into());
    }
    let out = args.out.clone().unwrap_or_else(|| args.records.clone());
    let summary = write_report(&records, &out)?;
    print!("{}", render_markdown(&summary));
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dst_core::evaluator::Scores;

    fn record(domain: Domain, variant: &str, seed: u64, jga: f64) -> ResultRecord {
        let slot = format!("{domain}-area");
        ResultRecord {
            run_id: format!("{domain}-{variant}-{seed}"),
            config: serde_json::json!({ "target_domain": domain, "variant": variant, "seed": seed }),
            seed,
            protocol: "zero_shot".into(),
            target_domain: Some(domain),
            variant: variant.parse().unwrap(),
            backend: "tiny".into(),
            checkpoint_hash: String::new(),
            evaluated_domains: BTreeSet::from([domain]),
            scores: Scores {
                joint_goal_accuracy: jga,
                per_domain_jga: BTreeMap::from([(domain, jga)]),
                slot_accuracy: BTreeMap::from([(slot, jga + 0.1)]),
                n_turns: 10,
                n_dialogues: 3,
            },
            predictions: "predictions.jsonl".into(),
        }
    }

    #[test]
    fn average_is_the_unweighted_mean_of_domain_means() {
        let mut records = Vec::new();
        for (i, d) in [Domain::Hotel, Domain::Taxi].into_iter().enumerate() {
            for seed in 0..3 {
                records.push(record(d, "slot_type", seed, 0.1 * (i + 1) as f64 + 0.02 * seed as f64));
            }
        }
        let summary = summarize(&records).unwrap();
        assert_eq!(summary.columns, vec![Domain::Hotel, Domain::Taxi]);
        let row = &summary.rows[0];
        let hotel = row.cells[&Domain::Hotel];
        assert_eq!(hotel.n, 3);
        assert!((hotel.mean - 0.12).abs() < 1e-12);
        assert!((hotel.std - 0.02).abs() < 1e-12);
        let want = (row.cells[&Domain::Hotel].mean + row.cells[&Domain::Taxi].mean) / 2.0;
        assert_eq!(row.average, Some(want));
        let table = render_markdown(&summary);
        assert!(table.starts_with("| Model | Hotel | Taxi | Average |"));
        assert!(table.contains("| zero_shot slot_type | 12.00±2.00 | 22.00±2.00 | 17.00 |"));
    }

    #[test]
    fn average_column_matches_reference_rows() {
        // Attraction, hotel, restaurant, taxi, train and the printed average.
        let rows = [
            ([31.92, 20.72, 20.09, 64.12, 28.83], "33.14"),
            ([32.98, 20.23, 20.01, 63.59, 30.04], "33.37"),
        ];
        for (cells, printed) in rows {
            let records: Vec<ResultRecord> = Domain::ALL
                .into_iter()
                .zip(cells)
                .map(|(d, m)| record(d, "naive", 0, m / 100.0))
                .collect();
            let summary = summarize(&records).unwrap();
            let table = render_markdown(&summary);
            assert!(table.trim_end().ends_with(&format!("| {printed} |")), "{table}");
        }
        // Rounded cells only pin this average to within half a unit per cell.
        let cells = [32.66, 18.73, 20.55, 64.62, 31.27];
        let records: Vec<ResultRecord> = Domain::ALL
            .into_iter()
            .zip(cells)
            .map(|(d, m)| record(d, "slot_type", 0, m / 100.0))
            .collect();
        let avg = 100.0 * summarize(&records).unwrap().rows[0].average.unwrap();
        assert!((avg - 33.56).abs() <= 0.01, "{avg}");
    }

    #[test]
    fn missing_cells_leave_the_average_blank() {
        let records = vec![
            record(Domain::Hotel, "slot_type", 0, 0.5),
            record(Domain::Taxi, "slot_type", 0, 0.5),
            record(Domain::Hotel, "raw_name", 0, 0.4),
        ];
        let summary = summarize(&records).unwrap();
        let raw = summary.rows.iter().find(|r| r.label.ends_with("raw_name")).unwrap();
        assert_eq!(raw.average, None);
        assert!(render_markdown(&summary).contains("| zero_shot raw_name | 40.00 | - | - |"));
    }

    #[test]
    fn charts_are_deterministic_and_error_bars_need_seeds() {
        let single = summarize(&[record(Domain::Hotel, "slot_type", 0, 0.5)]).unwrap();
        let chart = render_chart(Domain::Hotel, &single.slot_accuracy[&Domain::Hotel]);
        assert!(!chart.contains("class=\"err\""));
        assert_eq!(
            chart,
            render_chart(Domain::Hotel, &single.slot_accuracy[&Domain::Hotel])
        );

        let mut records = vec![
            record(Domain::Hotel, "slot_type", 0, 0.5),
            record(Domain::Hotel, "slot_type", 1, 0.6),
            record(Domain::Hotel, "raw_name", 0, 0.3),
            record(Domain::Hotel, "raw_name", 1, 0.2),
        ];
        let a = summarize(&records).unwrap();
        records.reverse();
        let b = summarize(&records).unwrap();
        assert_eq!(a, b);
        let chart = render_chart(Domain::Hotel, &a.slot_accuracy[&Domain::Hotel]);
        assert_eq!(chart.matches("class=\"err\"").count(), 2);
        assert_eq!(chart.matches("<title>").count(), 2);
    }
}
