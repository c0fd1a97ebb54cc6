use carbon_ledger::embodied::{accumulate_dynamic, embodied_energy, server_power, EmbodiedSession};
use carbon_ledger::intensity::{lookup_intensity, GridZone, IntensityProvider};
use carbon_ledger::ledger::{append_ledger, read_ledger, LedgerEntry};
use carbon_ledger::operational::{
    parse_energy_log_str, sum_process_energy, EnergyLog, EnergyRecord, ParseOptions, ProcessFilter,
};
use carbon_ledger::quantities::{joules_to_kwh, kwh_to_joules};
use carbon_ledger::report::{build_report, render_report, FootprintReport, ReportFormat};
use carbon_ledger::tokens::{
    consumption_seconds, ledger_totals, ConsumptionRateModel, CorpusStats, Direction, TokenLedger,
};
use carbon_ledger::{
    add_carbon, carbon_from_energy, CarbonIntensityValue, CarbonQuantity, EnergyQuantity,
    InferenceProfile, ServerPowerModel,
};
use chrono::{DateTime, FixedOffset, TimeZone, Utc};
use proptest::prelude::*;

const CASES: u32 = 1000;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()) || a == b
}

fn energy() -> impl Strategy<Value = EnergyQuantity> {
    (0.0..1e12f64).prop_map(|j| EnergyQuantity::from_joules(j).unwrap())
}

fn intensity() -> impl Strategy<Value = CarbonIntensityValue> {
    (0.0..2000.0f64).prop_map(|g| CarbonIntensityValue::from_g_per_kwh(g).unwrap())
}

fn server() -> impl Strategy<Value = ServerPowerModel> {
    (0.0..2000.0f64, 0.0..5.0f64, 0.0..2048.0f64)
        .prop_map(|(c, m, g)| ServerPowerModel::new(c, m, g).unwrap())
}

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Input), Just(Direction::Output)]
}

fn rates() -> impl Strategy<Value = ConsumptionRateModel> {
    (0u32..5_000_000, 0u32..5_000_000)
        .prop_map(|(i, o)| ConsumptionRateModel::new(i as f64 / 1e6, o as f64 / 1e6).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn carbon_is_bilinear(e in energy(), ci in intensity(), k in 0.0..1e3f64) {
        let base = carbon_from_energy(e, ci).grams();
        let scaled_e = carbon_from_energy(e.scale(k).unwrap(), ci).grams();
        let scaled_ci = carbon_from_energy(
            e,
            CarbonIntensityValue::from_g_per_kwh(ci.g_per_kwh() * k).unwrap(),
        ).grams();
        prop_assert!(rel_close(scaled_e, k * base, 1e-12), "{scaled_e} vs {}", k * base);
        prop_assert!(rel_close(scaled_ci, k * base, 1e-12), "{scaled_ci} vs {}", k * base);
        let doubled = carbon_from_energy(e.scale(2.0).unwrap(), ci).grams();
        prop_assert!(rel_close(doubled, 2.0 * base, 1e-12));
    }

    #[test]
    fn carbon_addition_commutes_and_associates(a in 0.0..1e9f64, b in 0.0..1e9f64, c in 0.0..1e9f64) {
        let q = |g| CarbonQuantity::from_grams(g).unwrap();
        prop_assert_eq!(add_carbon(q(a), q(b)), add_carbon(q(b), q(a)));
        let l = add_carbon(add_carbon(q(a), q(b)), q(c)).grams();
        let r = add_carbon(q(a), add_carbon(q(b), q(c))).grams();
        prop_assert!(rel_close(l, r, 1e-12));
    }

    #[test]
    fn unit_round_trips(j in 0.0..1e15f64, kwh in 0.0..1e9f64, kg in 0.0..1e9f64) {
        let e = EnergyQuantity::from_joules(j).unwrap();
        prop_assert!(rel_close(kwh_to_joules(joules_to_kwh(e)).unwrap().joules(), j, 1e-9));
        prop_assert!(rel_close(EnergyQuantity::from_kwh(kwh).unwrap().kwh(), kwh, 1e-9));
        let kj = e.kilojoules();
        prop_assert!(rel_close(EnergyQuantity::from_kilojoules(kj).unwrap().joules(), j, 1e-9));
        prop_assert!(rel_close(CarbonQuantity::from_kg(kg).unwrap().kg(), kg, 1e-9));
        let ci = CarbonIntensityValue::from_kg_per_kwh(kg / 1e6).unwrap();
        prop_assert!(rel_close(ci.kg_per_kwh(), kg / 1e6, 1e-9));
    }

    #[test]
    fn consumption_is_additive(a in 0u64..1_000_000_000, b in 0u64..1_000_000_000, d in direction(), m in rates()) {
        prop_assert_eq!(
            consumption_seconds(a + b, d, &m),
            consumption_seconds(a, d, &m) + consumption_seconds(b, d, &m)
        );
    }

    #[test]
    fn ledger_totals_over_concatenation(
        xs in prop::collection::vec((direction(), 1u64..1000, 0u64..1_000_000), 0..8),
        ys in prop::collection::vec((direction(), 1u64..1000, 0u64..1_000_000), 0..8),
        m in rates(),
    ) {
        let build = |v: &[(Direction, u64, u64)]| -> TokenLedger {
            v.iter()
                .enumerate()
                .map(|(i, &(d, f, w))| CorpusStats::from_words(format!("c{i}"), d, f, w).unwrap())
                .collect()
        };
        let (a, b) = (build(&xs), build(&ys));
        let ta = ledger_totals(&a, &m);
        let tb = ledger_totals(&b, &m);
        let tab = ledger_totals(&a.concat(b), &m);
        prop_assert_eq!(tab.tokens, ta.tokens + tb.tokens);
        prop_assert_eq!(tab.cu_seconds, ta.cu_seconds + tb.cu_seconds);
    }

    #[test]
    fn embodied_is_additive_over_token_partitions(
        m in server(),
        latency in 0.001..5.0f64,
        parts in prop::collection::vec(0u64..10_000_000, 1..10),
    ) {
        let total: u64 = parts.iter().sum();
        let whole = embodied_energy(&m, &InferenceProfile::new(latency, total).unwrap()).joules();
        let summed: f64 = parts
            .iter()
            .map(|&n| embodied_energy(&m, &InferenceProfile::new(latency, n).unwrap()).joules())
            .sum();
        prop_assert!(rel_close(whole, summed, 1e-12), "{whole} vs {summed}");
    }

    #[test]
    fn embodied_is_linear_in_each_parameter(
        (c, pm, g) in (0.0..2000.0f64, 0.0..5.0f64, 0.0..2048.0f64),
        latency in 0.001..5.0f64,
        n in 0u64..10_000_000,
        k in 0.01..100.0f64,
    ) {
        let e = |c: f64, pm: f64, g: f64, t: f64, n: u64| {
            embodied_energy(&ServerPowerModel::new(c, pm, g).unwrap(), &InferenceProfile::new(t, n).unwrap()).joules()
        };
        let base = e(c, pm, g, latency, n);
        prop_assert!(rel_close(e(c, pm, g, latency * k, n), k * base, 1e-12));
        prop_assert!(rel_close(e(c, pm, g, latency, n * 3), 3.0 * base, 1e-12));
        // P is affine in its fields: scaling all power terms scales P
        prop_assert!(rel_close(e(c * k, pm * k, g, latency, n), k * base, 1e-12));
        prop_assert!(rel_close(e(c * k, pm, g * k, latency, n), k * base, 1e-12));
        let zero_mem = server_power(&ServerPowerModel::new(c, pm, 0.0).unwrap()).watts();
        prop_assert_eq!(zero_mem, c);
    }

    #[test]
    fn dynamic_accumulation_is_permutation_invariant(
        sessions in prop::collection::vec((server(), 0.01..2.0f64, 0u64..1_000_000, intensity()), 1..12),
        seed in any::<u64>(),
    ) {
        let ts = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let list: Vec<EmbodiedSession> = sessions
            .iter()
            .enumerate()
            .map(|(i, &(m, t, n, ci))| {
                EmbodiedSession::estimate(format!("s{i}"), ts, m, InferenceProfile::new(t, n).unwrap(), ci)
            })
            .collect();
        let mut shuffled = list.clone();
        let len = shuffled.len();
        let mut s = seed;
        for i in (1..len).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(accumulate_dynamic(&list), accumulate_dynamic(&shuffled));
    }
}

const NAMES: [&str; 5] = [
    "node.exe",
    "java.exe",
    "chrome.exe",
    "My App, beta",
    "\"quoted\".exe",
];

fn record() -> impl Strategy<Value = EnergyRecord> {
    (
        0usize..NAMES.len(),
        prop::option::of("[a-z ]{1,8}"),
        0i64..400_000_000,
        0u32..1_000_000,
        prop_oneof![
            (1u32..=60).prop_map(f64::from),
            (1u32..=600).prop_map(|t| t as f64 / 10.0),
            (0.001..=60.0f64),
        ],
        0u64..u64::MAX / 1024,
        -12i32..=12,
    )
        .prop_map(|(name, app, secs, micros, interval, mj, tz)| EnergyRecord {
            process_name: NAMES[name].to_string(),
            app_id: app
                .filter(|a| !a.trim().is_empty())
                .map(|a| a.trim().to_string()),
            timestamp: DateTime::from_timestamp(1_600_000_000 + secs, micros * 1000)
                .unwrap()
                .with_timezone(&FixedOffset::east_opt(tz * 3600).unwrap()),
            interval_s: interval,
            energy_mj: mj,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn energy_log_csv_round_trip(records in prop::collection::vec(record(), 0..20)) {
        let log = EnergyLog::from_records("gen.csv", records);
        let csv = log.to_csv();
        let back = parse_energy_log_str(&csv, "gen.csv", &ParseOptions::default()).unwrap();
        prop_assert_eq!(back.records(), log.records());
        prop_assert_eq!(back.to_csv(), csv);
    }

    #[test]
    fn energy_log_partition(records in prop::collection::vec(record(), 1..30), split in 1usize..NAMES.len()) {
        let log = EnergyLog::from_records("gen.csv", records);
        let (left, right) = NAMES.split_at(split);
        let sum = |names: &[&str]| -> f64 {
            let f = ProcessFilter::any_of(names.iter().copied()).unwrap();
            sum_process_energy(&log, &f).map_or(0.0, |e| e.joules())
        };
        let both = sum(&NAMES);
        prop_assert!(rel_close(both, sum(left) + sum(right), 1e-12), "{both} vs {} + {}", sum(left), sum(right));

        let mut reversed: Vec<EnergyRecord> = log.records().to_vec();
        reversed.reverse();
        let rev = EnergyLog::from_records("rev.csv", reversed);
        let all = ProcessFilter::any_of(NAMES.iter().copied()).unwrap();
        prop_assert_eq!(sum_process_energy(&rev, &all).unwrap(), sum_process_energy(&log, &all).unwrap());
    }

    #[test]
    fn report_invariants_hold(e in energy(), o in energy(), ci in intensity()) {
        let r = build_report(e, o, ci);
        prop_assert!(r.check_invariants().is_ok());
        prop_assert!(rel_close(r.embodied_carbon.grams(), carbon_from_energy(e, ci).grams(), 1e-9));
        prop_assert!(rel_close(r.total_carbon.grams(), r.embodied_carbon.grams() + r.operational_carbon.grams(), 1e-9));
    }

    #[test]
    fn report_json_round_trip(e in energy(), o in energy(), ci in intensity(), notes in prop::collection::vec(".{0,20}", 0..3)) {
        let mut r = build_report(e, o, ci);
        r.notes = notes;
        let json = render_report(&r, ReportFormat::Json);
        let back = FootprintReport::from_json(&json).unwrap();
        prop_assert_eq!(render_report(&back, ReportFormat::Json), json);
        prop_assert!(rel_close(back.embodied_energy.joules(), e.joules(), 1e-9));
        prop_assert_eq!(&back.inputs_digest, &r.inputs_digest);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn ledger_read_back_in_append_order(kwh in prop::collection::vec(0.0..100.0f64, 1..12), ci in intensity()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let ts = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let entries: Vec<LedgerEntry> = kwh
            .iter()
            .enumerate()
            .map(|(i, &k)| LedgerEntry::operational(format!("e{i}"), ts, EnergyQuantity::from_kwh(k).unwrap(), ci))
            .collect();
        for (i, e) in entries.iter().enumerate() {
            prop_assert_eq!(append_ledger(&path, e).unwrap(), i + 1);
        }
        let back = read_ledger(&path).unwrap();
        prop_assert!(back.corrupt.is_empty());
        prop_assert_eq!(back.entries, entries);
    }
}

const BAD_ROWS: [&str; 4] = [
    "x.exe,,not-a-time,60,1",
    "x.exe,,2024-01-01T00:00:00Z,60,-5",
    "x.exe,,2024-01-01T00:00:00Z,sixty,1",
    "x.exe,,2024-01-01T00:00:00Z,60",
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn lenient_skips_exactly_what_strict_rejects(
        records in prop::collection::vec(record(), 0..10),
        bad in prop::collection::vec((0usize..BAD_ROWS.len(), any::<prop::sample::Index>()), 0..4),
    ) {
        let csv = EnergyLog::from_records("gen.csv", records.clone()).to_csv();
        let mut lines: Vec<String> = csv.lines().map(String::from).collect();
        for (b, at) in &bad {
            let pos = 1 + at.index(lines.len());
            lines.insert(pos, BAD_ROWS[*b].to_string());
        }
        let text = lines.join("\n") + "\n";
        let strict = parse_energy_log_str(&text, "mixed.csv", &ParseOptions::default());
        let lenient = parse_energy_log_str(&text, "mixed.csv", &ParseOptions::lenient()).unwrap();
        prop_assert_eq!(lenient.skipped().len(), bad.len());
        prop_assert_eq!(strict.is_err(), !bad.is_empty());
        prop_assert_eq!(lenient.records().len(), records.len());
    }

    #[test]
    fn zone_lookup_ignores_case(
        zone in prop::sample::select(vec!["EU-DC", "EAST-ASIA-DC", "DE-CASE-STUDY"]),
        flips in prop::collection::vec(any::<bool>(), 16),
    ) {
        let mixed: String = zone
            .chars()
            .zip(flips.iter().cycle())
            .map(|(c, &f)| if f { c.to_ascii_lowercase() } else { c })
            .collect();
        let get = |z: &str| lookup_intensity(&GridZone::new(z), &IntensityProvider::BuiltinTable).unwrap();
        let a = get(zone);
        prop_assert_eq!(get(&mixed), a);
        prop_assert_eq!(get(&format!("  {mixed} ")), a);
    }
}
