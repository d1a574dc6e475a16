use proptest::prelude::*;
use serde::Deserialize;
use viser_core::datamodel::{AttackType, Label};
use viser_core::evaluation::{RunResult, ScoreRecord};
use viser_core::reporting::{aggregate_runs, delta_table, render_report, DeltaReport, MethodReport, ReportFormat};

fn run(attack: AttackType, seed: u64, scores: &[(bool, f64)]) -> RunResult {
    let mut recs: Vec<ScoreRecord> = scores
        .iter()
        .enumerate()
        .map(|(i, (attack, s))| ScoreRecord {
            sample_id: format!("s{i}"),
            label: if *attack { Label::Attack } else { Label::Bonafide },
            score: *s,
        })
        .collect();
    // Both classes present.
    recs.push(ScoreRecord { sample_id: "fa".into(), label: Label::Attack, score: 0.5 });
    recs.push(ScoreRecord { sample_id: "fb".into(), label: Label::Bonafide, score: 0.5 });
    RunResult::from_scores("m", attack, seed, recs, 0, "fp").unwrap()
}

fn runs_strategy() -> impl Strategy<Value = Vec<RunResult>> {
    prop::collection::vec(prop::collection::vec((any::<bool>(), 0.0..1.0f64), 2..12), 7 * 3).prop_map(|sets| {
        sets.iter()
            .enumerate()
            .map(|(i, s)| run(AttackType::ATTACKS[i % 7], (i / 7) as u64, s))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregation_ignores_run_order(runs in runs_strategy(), rot in 0..21usize) {
        let a = aggregate_runs(&runs, Some(3)).unwrap();
        let mut shuffled = runs.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let b = aggregate_runs(&shuffled, Some(3)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(!a.partial);
        let mean = a.per_attack.values().map(|c| c.mean_auroc).sum::<f64>() / 7.0;
        prop_assert!((a.avg_auroc - mean).abs() <= 1e-12);
        prop_assert!(a.per_attack.values().all(|c| c.n_runs == 3));
    }

    #[test]
    fn baseline_against_itself_is_zero(runs in runs_strategy()) {
        let a = aggregate_runs(&runs, None).unwrap();
        let d = delta_table(&a, std::slice::from_ref(&a)).unwrap();
        prop_assert!(d.rows[0].auroc_delta.values().all(|v| *v == 0.0));
        prop_assert!(d.rows[0].apcer_delta.values().all(|v| *v == 0.0));
        prop_assert_eq!(d.rows[0].avg_auroc_delta, 0.0);
        prop_assert_eq!(d.rows[0].avg_apcer_delta, 0.0);
    }

    #[test]
    fn missing_runs_mark_report_partial(runs in runs_strategy(), drop in 0..21usize) {
        let mut runs = runs;
        runs.remove(drop);
        let a = aggregate_runs(&runs, Some(3)).unwrap();
        prop_assert!(a.partial);
        prop_assert!(a.cell_partial(AttackType::ATTACKS[drop % 7]));
    }
}

#[derive(Deserialize)]
struct Row {
    method: String,
    values: Vec<f64>,
    bold: Vec<String>,
}

#[derive(Deserialize)]
struct Table {
    attacks: Vec<String>,
    auroc: Vec<Row>,
    apcer: Vec<Row>,
}

fn table() -> (Table, DeltaReport) {
    let t: Table = serde_json::from_str(include_str!("data/table_fixture.json")).unwrap();
    let attacks: Vec<AttackType> = t.attacks.iter().map(|a| a.parse().unwrap()).collect();
    let report = |i: usize| {
        let cells: Vec<_> = attacks
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let base = if i == 0 { (0.0, 0.0) } else { (t.auroc[0].values[k], t.apcer[0].values[k]) };
                (*a, base.0 + t.auroc[i].values[k], base.1 + t.apcer[i].values[k])
            })
            .collect::<Vec<_>>();
        MethodReport::from_means(&t.auroc[i].method, &cells).unwrap()
    };
    let methods: Vec<_> = (1..t.auroc.len()).map(report).collect();
    let d = delta_table(&report(0), &methods).unwrap();
    (t, d)
}

#[test]
fn markdown_bolds_the_table_cells() {
    let (t, d) = table();
    let md = render_report(&d, ReportFormat::Markdown);
    let sections: Vec<&str> = md.split("### ").skip(1).collect();
    assert_eq!(sections.len(), 2);
    let mut names = t.attacks.clone();
    names.push("average".into());
    for (section, rows) in sections.iter().zip([&t.auroc, &t.apcer]) {
        let lines: Vec<&str> = section.lines().filter(|l| l.starts_with("| ")).collect();
        // Header, baseline, then one line per method.
        assert_eq!(lines.len(), rows.len() + 1);
        for (line, row) in lines[2..].iter().zip(&rows[1..]) {
            let cells: Vec<&str> = line.trim_matches('|').split('|').map(str::trim).skip(1).collect();
            assert_eq!(cells.len(), names.len());
            for (cell, name) in cells.iter().zip(&names) {
                assert_eq!(cell.starts_with("**"), row.bold.contains(name), "{} {name}: {cell}", row.method);
            }
        }
    }
}

#[test]
fn csv_rows_cover_every_method_metric_and_column() {
    let (t, d) = table();
    let csv = render_report(&d, ReportFormat::Csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,attack_type,metric,mean,delta,n_runs");
    assert_eq!(lines.len(), 1 + t.auroc.len() * 2 * 8);
    assert!(lines.contains(&"xent,average,auroc,0.771086,0.000000,7"));
    let row = lines
        .iter()
        .find(|l| l.starts_with("et_initial_denoised,average,apcer_at_bpcer1,"))
        .unwrap();
    let delta: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
    assert!((delta + 0.1063).abs() < 5e-4);
}
