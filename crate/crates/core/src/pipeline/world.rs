use crate::data::{
    circle_means, dirichlet_partition, holdout_test_split, labeled_split, load_dataset_file,
    make_gaussian_mixture, Dataset, SplitMode,
};
use crate::error::{Error, Result};
use crate::metrics::reveal;
use crate::rng::{derive_seed, tag};

use super::config::{DatasetSource, ExperimentConfig};

/// One client's data after all splits.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub client_id: usize,
    /// Labeled samples used for training.
    pub labeled: Dataset,
    /// Labeled samples held out locally for the confusion protocol.
    pub local_test: Dataset,
    /// Samples whose labels are hidden.
    pub unlabeled: Dataset,
}

#[derive(Debug, Clone)]
pub struct World {
    pub num_classes: usize,
    pub dim: usize,
    pub clients: Vec<ClientData>,
    pub global_test: Dataset,
}

impl World {
    pub fn labeled_total(&self) -> usize {
        self.clients.iter().map(|c| c.labeled.len()).sum()
    }

    pub fn unlabeled_total(&self) -> usize {
        self.clients.iter().map(|c| c.unlabeled.len()).sum()
    }
}

pub(crate) fn world_seed(config: &ExperimentConfig, label: &str) -> u64 {
    derive_seed(config.seed, &[tag("world"), config.partition.seed, tag(label)])
}

fn source_dataset(config: &ExperimentConfig) -> Result<Dataset> {
    match &config.dataset.source {
        DatasetSource::GaussianMixture {
            classes,
            per_class,
            sigma,
            radius,
            means,
        } => {
            let means = match means {
                Some(m) => m.clone(),
                None => circle_means(*classes, *radius),
            };
            make_gaussian_mixture(*classes, *per_class, &means, *sigma, world_seed(config, "data"))
        }
        DatasetSource::File { path } => {
            let ds = load_dataset_file(path)?;
            if ds.samples.iter().any(|s| s.label().is_none()) {
                return Err(Error::invalid("world dataset must be fully labeled"));
            }
            Ok(ds)
        }
    }
}

fn partition_or_empty(
    ds: &Dataset,
    clients: usize,
    gamma: f64,
    mode: SplitMode,
    seed: u64,
) -> Result<Vec<Dataset>> {
    if ds.is_empty() {
        return Ok((0..clients)
            .map(|k| ds.empty_like(format!("{}_client{k}", ds.name)))
            .collect());
    }
    dirichlet_partition(ds, clients, gamma, mode, seed)
}

/// Global test split, labeled/unlabeled split, client partitions and local
/// holdouts. Partitioning unlabeled data by class is part of the simulation
/// set-up and is the only place outside evaluation that sees hidden labels.
pub fn build_world(config: &ExperimentConfig) -> Result<World> {
    config.partition.validate()?;
    let full = source_dataset(config)?;
    let (pool, global_test) = holdout_test_split(
        &full,
        config.dataset.global_test_fraction,
        world_seed(config, "global_test"),
    )?;
    let p = &config.partition;
    let (labeled, unlabeled) = labeled_split(&pool, p.lambda, world_seed(config, "labeled_split"))?;
    let labeled_parts = partition_or_empty(
        &labeled,
        p.clients,
        p.gamma,
        p.label_mode,
        world_seed(config, "partition_labeled"),
    )?;
    let unlabeled_parts = {
        let _scope = reveal("unlabeled partition set-up");
        partition_or_empty(
            &unlabeled,
            p.clients,
            p.gamma,
            p.unlabeled_mode,
            world_seed(config, "partition_unlabeled"),
        )?
    };
    let mut clients = Vec::with_capacity(p.clients);
    for (k, (lab, unl)) in labeled_parts.into_iter().zip(unlabeled_parts).enumerate() {
        let (train, test) = if lab.is_empty() {
            (lab.empty_like(format!("client{k}_labeled")), lab.empty_like(format!("client{k}_test")))
        } else {
            holdout_test_split(
                &lab,
                p.test_fraction,
                derive_seed(world_seed(config, "local_holdout"), &[k as u64]),
            )?
        };
        clients.push(ClientData {
            client_id: k,
            labeled: train,
            local_test: test,
            unlabeled: unl,
        });
    }
    Ok(World {
        num_classes: full.num_classes,
        dim: full.dim,
        clients,
        global_test,
    })
}
