use std::path::{Path, PathBuf};

use serde::Serialize;

use mocae_core::calib::{
    apply_calibrators, fit_calibrator_set, load_calibrators, save_calibrators, CalibrationMethod,
    CalibrationMode, CalibratorSet,
};
use mocae_core::detections::{
    load_detections, load_ground_truth, write_detections, write_ground_truth, DetectionStore,
    GroundTruthSet,
};
use mocae_core::fuse::{contribution_shares, fuse_pipeline, FusionConfig, NmsKind};
use mocae_core::geometry::GeometryKind;
use mocae_core::metrics::{
    build_bins, calibration_errors, coco_taus, evaluate, format_table, laece, pct,
    reliability_export, sweep as run_sweep, AceDenominator, ApRule, BinWeighting, EvalOptions,
    ReliabilityFormat, SweepParam, DEFAULT_BINS, DEFAULT_MAX_DETS,
};
use mocae_core::oracle::{
    gen_synthetic, miscalibration_demo, theorem_config, verify_theorem, SyntheticSceneSpec,
    THEOREM_IOU_NMS,
};

use crate::config::{
    pick, pick_list, required, MethodArg, ModeArg, Preset, RunConfig, WeightingArg,
};
use crate::{
    ApArgs, CalibrateArgs, CliError, DemoArgs, EvalArgs, FuseArgs, FusionArgs, InputArgs,
    OracleCheckArgs, ReliabilityArgs, SpecArgs, SweepArgs, SynthArgs,
};

const DEFAULT_SWEEP_VALUES: [f64; 7] = [0.0, 0.001, 0.01, 0.05, 0.1, 0.2, 0.3];

fn geometry(flag: Option<GeometryKind>, rc: &RunConfig) -> GeometryKind {
    pick(flag, rc.geometry, GeometryKind::AxisAligned)
}

fn load_inputs(
    input: &InputArgs,
    rc: &RunConfig,
) -> Result<(DetectionStore, GroundTruthSet), CliError> {
    let kind = geometry(input.geometry, rc);
    let dets_path = required(input.dets.clone().or_else(|| single_dets(rc)), "dets")?;
    let gt_path = required(input.gt.clone().or_else(|| rc.gt.clone()), "gt")?;
    Ok((
        load_detections(dets_path, kind)?,
        load_ground_truth(gt_path, kind)?,
    ))
}

fn single_dets(rc: &RunConfig) -> Option<PathBuf> {
    rc.dets.as_ref().and_then(|v| v.first().cloned())
}

fn write_report(
    flag: &Option<PathBuf>,
    rc: &RunConfig,
    report: &impl Serialize,
) -> Result<(), CliError> {
    if let Some(path) = flag.clone().or_else(|| rc.report.clone()) {
        let text = serde_json::to_string_pretty(report).expect("reports serialise") + "\n";
        std::fs::write(&path, text)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn fusion_config(
    args: &FusionArgs,
    rc: &RunConfig,
    base: FusionConfig,
) -> Result<FusionConfig, CliError> {
    let cfg = FusionConfig {
        nms_kind: pick(args.nms, rc.nms, base.nms_kind),
        iou_nms: args.iou_nms.or(rc.iou_nms).or(base.iou_nms),
        sigma_nms: pick(args.sigma_nms, rc.sigma_nms, base.sigma_nms),
        score_voting: args.score_voting.or(rc.score_voting).or(base.score_voting),
        sigma_sv: pick(args.sigma_sv, rc.sigma_sv, base.sigma_sv),
        background_threshold: pick(
            args.background_threshold,
            rc.background_threshold,
            base.background_threshold,
        ),
        top_k: pick(args.top_k, rc.top_k, base.top_k),
        prune_after_soft: pick(
            args.prune_after_soft,
            rc.prune_after_soft,
            base.prune_after_soft,
        ),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn ap_options(args: &ApArgs, rc: &RunConfig) -> EvalOptions {
    let taus = pick_list(args.taus.clone(), rc.taus.clone());
    EvalOptions {
        taus: if taus.is_empty() { coco_taus() } else { taus },
        max_dets: pick(args.max_dets, rc.max_dets, DEFAULT_MAX_DETS),
        ap_rule: pick(args.ap_rule, rc.ap_rule, ApRule::Coco101),
        ..EvalOptions::default()
    }
}

#[derive(Serialize)]
struct CalibrateReport {
    method: CalibrationMethod,
    mode: CalibrationMode,
    pairs: usize,
    bins: usize,
    laece_before: f64,
    laece_after: f64,
    calibrators: usize,
    warnings: Vec<String>,
}

pub fn calibrate(a: CalibrateArgs, rc: RunConfig) -> Result<(), CliError> {
    let (dets, gts) = load_inputs(&a.input, &rc)?;
    let out = required(a.out.clone().or_else(|| rc.out.clone()), "out")?;
    let method: CalibrationMethod = pick(a.method, rc.method, MethodArg::Ir).into();
    let mode: CalibrationMode = pick(a.mode, rc.mode, ModeArg::Ca).into();
    let bins = pick(a.bins, rc.bins, DEFAULT_BINS);
    let cals = fit_calibrator_set(&dets, &gts, mode, method)?;
    for w in cals.warnings() {
        log::warn!("{w}");
    }
    let before = laece(&build_bins(&dets, &gts, bins, BinWeighting::Reduced)?);
    let after = laece(&build_bins(
        &apply_calibrators(&dets, &cals),
        &gts,
        bins,
        BinWeighting::Reduced,
    )?);
    save_calibrators(&cals, &out)?;
    let report = CalibrateReport {
        method,
        mode,
        pairs: dets.len(),
        bins,
        laece_before: before,
        laece_after: after,
        calibrators: cals.len(),
        warnings: cals.warnings().to_vec(),
    };
    let rows = vec![
        vec!["detections".to_string(), dets.len().to_string()],
        vec!["calibrators".to_string(), cals.len().to_string()],
        vec!["LaECE before".to_string(), pct(before)],
        vec!["LaECE after".to_string(), pct(after)],
    ];
    print!("{}", format_table(&["fit set", "value"], &rows));
    write_report(&a.report.report, &rc, &report)
}

#[derive(Serialize)]
struct FuseReport {
    experts: usize,
    input_detections: Vec<usize>,
    fused_detections: usize,
    config: FusionConfig,
    shares: std::collections::BTreeMap<u32, f64>,
}

pub fn fuse(a: FuseArgs, rc: RunConfig) -> Result<(), CliError> {
    let kind = geometry(a.geometry, &rc);
    let det_paths = pick_list(a.dets.clone(), rc.dets.clone());
    if det_paths.is_empty() {
        return Err(CliError::Usage("missing required option --dets".into()));
    }
    let out = required(a.out.clone().or_else(|| rc.out.clone()), "out")?;
    let mut cal_args = pick_list(a.cal.clone(), rc.cal.clone());
    if cal_args.is_empty() || (cal_args.len() == 1 && cal_args[0] == "identity") {
        cal_args = vec!["identity".to_string(); det_paths.len()];
    }
    let experts = det_paths
        .iter()
        .map(|p| load_detections(p, kind))
        .collect::<mocae_core::Result<Vec<_>>>()?;
    let cals = cal_args
        .iter()
        .map(|c| {
            if c == "identity" {
                Ok(CalibratorSet::identity())
            } else {
                load_calibrators(c)
            }
        })
        .collect::<mocae_core::Result<Vec<_>>>()?;
    let cfg = fusion_config(&a.fusion, &rc, FusionConfig::default())?;
    let fused = fuse_pipeline(&experts, &cals, &cfg)?;
    write_detections(&fused, &out)?;

    let shares = contribution_shares(&fused);
    let mut rows: Vec<Vec<String>> = det_paths
        .iter()
        .zip(&experts)
        .enumerate()
        .map(|(i, (p, s))| {
            vec![
                format!("{i}: {}", p.display()),
                s.len().to_string(),
                pct(shares.get(&(i as u32)).copied().unwrap_or(0.0)),
            ]
        })
        .collect();
    rows.push(vec!["fused".to_string(), fused.len().to_string(), pct(1.0)]);
    print!(
        "{}",
        format_table(&["expert", "detections", "share"], &rows)
    );
    let report = FuseReport {
        experts: experts.len(),
        input_detections: experts.iter().map(DetectionStore::len).collect(),
        fused_detections: fused.len(),
        config: cfg,
        shares,
    };
    write_report(&a.report.report, &rc, &report)
}

pub fn eval(a: EvalArgs, rc: RunConfig) -> Result<(), CliError> {
    let (dets, gts) = load_inputs(&a.input, &rc)?;
    let opts = EvalOptions {
        bins: pick(a.bins, rc.bins, DEFAULT_BINS),
        ace: pick(a.ace, rc.ace, AceDenominator::NonEmpty),
        ..ap_options(&a.ap, &rc)
    };
    let report = evaluate(&dets, &gts, &opts)?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    print!("{}", report.to_table());
    write_report(&a.report.report, &rc, &report)
}

pub fn reliability(a: ReliabilityArgs, rc: RunConfig) -> Result<(), CliError> {
    let (dets, gts) = load_inputs(&a.input, &rc)?;
    let out = required(a.out.clone().or_else(|| rc.out.clone()), "out")?;
    let bins_n = pick(a.bins, rc.bins, DEFAULT_BINS);
    let weighting = match pick(a.weighting, rc.weighting, WeightingArg::Reduced) {
        WeightingArg::Reduced => BinWeighting::Reduced,
        WeightingArg::Precision => BinWeighting::Precision {
            tau: pick(a.tau, rc.tau, 0.5),
        },
    };
    let bins = build_bins(&dets, &gts, bins_n, weighting)?;
    reliability_export(
        &bins,
        &out,
        pick(a.format, rc.format, ReliabilityFormat::Csv),
    )?;
    let e = calibration_errors(&bins, AceDenominator::NonEmpty);
    let rows = vec![
        vec!["classes".to_string(), bins.classes.len().to_string()],
        vec!["bins".to_string(), bins_n.to_string()],
        vec!["LaECE".to_string(), pct(e.laece)],
        vec!["LaACE".to_string(), pct(e.laace)],
        vec!["LaMCE".to_string(), pct(e.lamce)],
    ];
    print!("{}", format_table(&["reliability", "value"], &rows));
    Ok(())
}

pub fn sweep(a: SweepArgs, rc: RunConfig) -> Result<(), CliError> {
    let (dets, gts) = load_inputs(&a.input, &rc)?;
    let param = pick(a.param, rc.param, SweepParam::BackgroundThreshold);
    let mut values = pick_list(a.values.clone(), rc.values.clone());
    if values.is_empty() {
        values = DEFAULT_SWEEP_VALUES.to_vec();
    }
    let base = FusionConfig {
        nms_kind: NmsKind::Standard,
        ..FusionConfig::default()
    };
    let cfg = fusion_config(&a.fusion, &rc, base)?;
    let opts = ap_options(&a.ap, &rc);
    let rows = run_sweep(&dets, &gts, param, &values, &cfg, &opts)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.value),
                format!("{:.4}", r.mean_count_per_image),
                r.surviving.to_string(),
                pct(r.ap),
            ]
        })
        .collect();
    print!(
        "{}",
        format_table(&["value", "dets/image", "surviving", "AP"], &table)
    );
    write_report(&a.report.report, &rc, &rows)
}

fn scene_spec(
    args: &SpecArgs,
    rc: &RunConfig,
    default: Preset,
) -> Result<SyntheticSceneSpec, CliError> {
    let mut spec = match args.spec.clone().or_else(|| rc.spec.clone()) {
        Some(path) => read_spec(&path)?,
        None => match pick(args.preset, rc.preset, default) {
            Preset::Theorem => SyntheticSceneSpec::theorem_default(),
            Preset::Demo => SyntheticSceneSpec::demo_default(),
        },
    };
    if let Some(seed) = args.seed.or(rc.seed) {
        spec.seed = seed;
    }
    spec.validate()?;
    Ok(spec)
}

fn read_spec(path: &Path) -> Result<SyntheticSceneSpec, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn synth(a: SynthArgs, rc: RunConfig) -> Result<(), CliError> {
    let spec = scene_spec(&a.spec, &rc, Preset::Demo)?;
    let dir = required(a.out_dir.clone().or_else(|| rc.out_dir.clone()), "out-dir")?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let data = gen_synthetic(&spec)?;
    write_ground_truth(&data.gts, dir.join("gt.json"))?;
    let mut rows = Vec::new();
    for (i, store) in data.experts.iter().enumerate() {
        let name = format!("expert_{i}.json");
        write_detections(store, dir.join(&name))?;
        rows.push(vec![name, store.len().to_string()]);
    }
    let spec_text = serde_json::to_string_pretty(&spec).expect("specs serialise") + "\n";
    std::fs::write(dir.join("spec.json"), spec_text)
        .map_err(|e| CliError::Usage(format!("cannot write spec.json: {e}")))?;
    rows.push(vec!["gt.json".to_string(), data.gts.len().to_string()]);
    print!("{}", format_table(&["file", "records"], &rows));
    Ok(())
}

pub fn oracle_check(a: OracleCheckArgs, rc: RunConfig) -> Result<(), CliError> {
    let spec = scene_spec(&a.spec, &rc, Preset::Theorem)?;
    let scenes = pick(a.scenes, rc.scenes, 100);
    let mut taus = pick_list(a.taus.clone(), rc.taus.clone());
    if taus.is_empty() {
        taus = vec![0.5, 0.75];
    }
    let cfg = FusionConfig {
        iou_nms: Some(pick(a.iou_nms, rc.iou_nms, THEOREM_IOU_NMS)),
        ..theorem_config()
    };
    cfg.validate()?;
    let report = verify_theorem(&spec, &cfg, scenes, &taus).map_err(|e| match e {
        mocae_core::Error::Domain(m) if m.contains("no valid scene") => CliError::Failure(m),
        other => other.into(),
    })?;
    println!(
        "pass {}/{} (rejected candidates: {}, AP rule: area, tolerance 1e-9)",
        report.passed, report.scenes, report.rejected
    );
    write_report(&a.report.report, &rc, &report)?;
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Failure(format!(
            "{} of {} scenes violate AP = N_TP/M",
            report.scenes - report.passed,
            report.scenes
        )))
    }
}

pub fn demo(a: DemoArgs, rc: RunConfig) -> Result<(), CliError> {
    let spec = scene_spec(&a.spec, &rc, Preset::Demo)?;
    let cfg = fusion_config(&a.fusion, &rc, FusionConfig::default())?;
    let report = miscalibration_demo(&spec, &cfg)?;
    print!("{}", report.to_table());
    write_report(&a.report.report, &rc, &report)
}
