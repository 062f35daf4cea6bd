use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use avt::data::save_idx;
use avt::error::parse_document;
use avt::eval::{evaluate, MetricsReport, Predictor};
use avt::groups::{agglomerative_cluster, top_level_split, GroupPartition, Linkage};
use avt::ndt::{build_plan, train_ndt, Ndt};
use avt::network::{LayerSpec, Network};
use avt::train::train;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::{nest, read, EvalRun, NdtRun, Paths, TrainRun};
use crate::manifest::Manifest;
use crate::CliError;

/// Options shared by every subcommand.
pub struct Common {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub data_dir: Option<PathBuf>,
}

impl Common {
    fn load_config<T: DeserializeOwned>(&self) -> Result<(T, Paths, PathBuf), CliError> {
        let path = self
            .config
            .clone()
            .ok_or_else(|| CliError::Usage("--config is required for this command".into()))?;
        let cfg = parse_document(&read(&path)?).map_err(|e| CliError::at(&path, e))?;
        let paths = Paths {
            config_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            data_dir: self.data_dir.clone(),
        };
        Ok((cfg, paths, path))
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::Io(self.out.clone(), e))?;
        Ok(&self.out)
    }
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config types serialize")
}

pub fn synth(common: &Common, seed: Option<u64>) -> Result<(), CliError> {
    let (mut spec, _, cfg_path): (avt::data::BlobSpec, _, _) = common.load_config()?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = avt::data::synth_blobs(&spec)?;
    let out = common.out_dir()?;
    let mut m = Manifest::new("synth", to_value(&spec));
    m.input(&cfg_path)?;
    let (images, labels) = (out.join("images-idx3-ubyte"), out.join("labels-idx1-ubyte"));
    save_idx(&ds, &images, &labels)?;
    m.record(out, "images-idx3-ubyte")?;
    m.record(out, "labels-idx1-ubyte")?;
    m.finish(out)?;
    println!("wrote {} samples of {} classes to {}", ds.len(), ds.n_classes, out.display());
    Ok(())
}

pub fn cluster(common: &Common, model: &Path) -> Result<(), CliError> {
    let net = Network::load(model).map_err(|e| CliError::at(model, e))?;
    let last = net.layers().len() - 1;
    if !matches!(net.layers()[last], LayerSpec::Dense { .. }) {
        return Err(CliError::Usage(format!(
            "{}: final layer is not Dense, nothing to cluster",
            model.display()
        )));
    }
    let head = &net.layer_params(last).expect("dense layers have parameters").weight;
    let tree = agglomerative_cluster(head, Linkage::Average)?;
    let out = common.out_dir()?;
    let mut m = Manifest::new("cluster", serde_json::json!({ "model": model, "linkage": "average" }));
    m.input(model)?;
    m.write(out, "tree.json", (tree.to_json()? + "\n").as_bytes())?;
    m.write(out, "partition.json", (top_level_split(&tree).to_json()? + "\n").as_bytes())?;
    let text = tree.render_text(None);
    m.write(out, "dendrogram.txt", text.as_bytes())?;
    m.finish(out)?;
    print!("{text}");
    Ok(())
}

pub fn train_cmd(common: &Common, seed: Option<u64>, threads: Option<usize>) -> Result<(), CliError> {
    let (mut run, paths, cfg_path): (TrainRun, _, _) = common.load_config()?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(t) = threads {
        run.train.threads = t;
    }
    let mut m = Manifest::new("train", serde_json::Value::Null);
    m.input(&cfg_path)?;
    let (ds, files) = run.dataset.load(&paths)?;
    for f in &files {
        m.input(f)?;
    }
    if let Some(g) = &run.groups {
        if run.train.partition.is_some() {
            return Err(CliError::schema("groups", "given together with train.partition"));
        }
        let (p, path) = g.load(&paths)?;
        m.input(&path)?;
        run.train.partition = Some(p.to_file());
    }
    run.train.validate().map_err(|e| nest("train", e))?;
    let layers = run.architecture.layers(ds.sample_shape(), ds.n_classes)?;
    let net = Network::init(ds.sample_shape(), layers, run.train.seed).map_err(|e| nest("architecture", e))?;
    let (net, history) = train(net, &ds, &run.train)?;
    m.config = to_value(&run);

    let out = common.out_dir()?;
    m.write(out, "model.json", (net.to_json()? + "\n").as_bytes())?;
    m.write(out, "history.jsonl", history.to_json_lines()?.as_bytes())?;
    m.finish(out)?;
    if let Some(r) = history.records.last() {
        println!(
            "epoch {}: loss {:.6}, clean error {:.2}%",
            r.epoch,
            r.mean_loss,
            100.0 * r.clean_error
        );
    }
    Ok(())
}

pub fn train_ndt_cmd(common: &Common, seed: Option<u64>, threads: Option<usize>) -> Result<(), CliError> {
    let (mut run, paths, cfg_path): (NdtRun, _, _) = common.load_config()?;
    if let Some(s) = seed {
        run.train.seed = s;
    }
    if let Some(t) = threads {
        run.train.threads = t;
    }
    let mut m = Manifest::new("train-ndt", to_value(&run));
    m.input(&cfg_path)?;
    let (ds, files) = run.dataset.load(&paths)?;
    for f in &files {
        m.input(f)?;
    }
    let tree_path = paths.local(&run.tree);
    let tree = avt::groups::ClusterTree::from_json(&read(&tree_path)?).map_err(|e| CliError::at(&tree_path, e))?;
    m.input(&tree_path)?;
    let base = match &run.finetune_from {
        Some(p) => {
            let p = paths.local(p);
            m.input(&p)?;
            Some(Network::load(&p).map_err(|e| CliError::at(&p, e))?)
        }
        None => None,
    };
    let layers = run.architecture.layers(ds.sample_shape(), 2)?;
    let plan = build_plan(&tree, run.variant, &run.eps_table, ds.sample_shape(), &layers)?;
    let (ndt, histories) = train_ndt(&plan, &ds, &run.train, base.as_ref())?;

    let out = common.out_dir()?;
    ndt.save(&out.join("ndt"))?;
    m.record(out, "ndt/ndt.json")?;
    for node in &plan.nodes {
        m.record(out, &format!("ndt/nodes/{}.json", node.id))?;
    }
    for (node, h) in plan.nodes.iter().zip(&histories) {
        m.write(out, &format!("history/{}.jsonl", node.id), h.to_json_lines()?.as_bytes())?;
    }
    m.finish(out)?;
    println!("trained {} nodes (depth {})", plan.nodes.len(), plan.depth());
    Ok(())
}

enum Model {
    Net(Network),
    Tree(Ndt),
}

fn load_model(path: &Path, m: &mut Manifest) -> Result<Model, CliError> {
    if !path.exists() {
        let e = std::io::Error::new(std::io::ErrorKind::NotFound, "model not found");
        return Err(CliError::Io(path.to_path_buf(), e));
    }
    if path.is_dir() {
        let dir = if path.join("ndt.json").is_file() {
            path.to_path_buf()
        } else {
            path.join("ndt")
        };
        let ndt = Ndt::load(&dir).map_err(|e| CliError::at(&dir, e))?;
        m.input(&dir.join("ndt.json"))?;
        for node in &ndt.plan.nodes {
            m.input(&dir.join("nodes").join(format!("{}.json", node.id)))?;
        }
        Ok(Model::Tree(ndt))
    } else {
        m.input(path)?;
        Ok(Model::Net(Network::load(path).map_err(|e| CliError::at(path, e))?))
    }
}

fn eps_label(eps: f64) -> String {
    format!("{eps}")
}

pub fn eval(common: &Common, model: &Path, eps_flag: Option<Vec<f64>>, certify: bool) -> Result<(), CliError> {
    let (mut run, paths, cfg_path): (EvalRun, _, _) = common.load_config()?;
    match (eps_flag, certify) {
        (Some(e), _) => run.eps = e,
        (None, true) => return Err(CliError::Usage("certify needs --eps".into())),
        (None, false) => {}
    }
    if run.eps.is_empty() {
        return Err(CliError::schema("eps", "no radius given (use --eps or the config)"));
    }
    for (i, &e) in run.eps.iter().chain(&run.eps_inner).enumerate() {
        if !(e >= 0.0 && e.is_finite()) {
            let field = if i < run.eps.len() { format!("eps[{i}]") } else { "eps_inner".into() };
            return Err(CliError::schema(field, format!("{e} is not a finite non-negative radius")));
        }
    }
    let command = if certify { "certify" } else { "eval" };
    let mut m = Manifest::new(command, to_value(&run));
    m.input(&cfg_path)?;
    let model_obj = load_model(model, &mut m)?;
    let (ds, files) = run.dataset.load(&paths)?;
    for f in &files {
        m.input(f)?;
    }
    let partition: GroupPartition = match (&run.groups, &model_obj) {
        (Some(g), _) => {
            let (p, path) = g.load(&paths)?;
            m.input(&path)?;
            p
        }
        (None, Model::Tree(ndt)) => top_level_split(&ndt.plan.tree),
        (None, Model::Net(_)) => return Err(CliError::schema("groups", "required when evaluating a single network")),
    };
    let predictor = match &model_obj {
        Model::Net(n) => Predictor::Network(n),
        Model::Tree(t) => Predictor::Ndt(t),
    };
    for (what, n) in [("dataset", ds.n_classes), ("partition", partition.n_classes())] {
        if n != predictor.n_classes() {
            return Err(CliError::Core(avt::Error::Consistency(format!(
                "{what} has {n} classes but the model has {}",
                predictor.n_classes()
            ))));
        }
    }
    let model_id = model.display().to_string();
    let out = common.out_dir()?;
    let mut table = MetricsReport::table_header();
    table.push('\n');
    for &eps in &run.eps {
        let report = evaluate(predictor, &ds, &partition, eps, run.eps_inner.unwrap_or(eps), &model_id)?;
        m.write(
            out,
            &format!("report-eps{}.json", eps_label(eps)),
            (report.to_json()? + "\n").as_bytes(),
        )?;
        let _ = writeln!(table, "{}", report.table_row());
    }
    m.write(out, "table.txt", table.as_bytes())?;
    m.finish(out)?;
    print!("{table}");
    Ok(())
}
