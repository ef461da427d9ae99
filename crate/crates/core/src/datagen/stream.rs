use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::composite::{build_composites, CompositeImage, CompositionLabel};
use crate::datagen::patterns::ClassPattern;
use crate::datagen::render::RenderConfig;
use crate::error::{Error, Result};
use crate::seeding::{rng_for, rng_from};

/// One segment of a stream: a label subset with its train and test data.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub id: usize,
    pub labels: Vec<CompositionLabel>,
    pub train: Vec<CompositeImage>,
    pub test: Vec<CompositeImage>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperienceStream {
    pub experiences: Vec<Experience>,
}

impl ExperienceStream {
    pub fn len(&self) -> usize {
        self.experiences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiences.is_empty()
    }

    /// Union of all label sets in experience order.
    pub fn labels(&self) -> Vec<CompositionLabel> {
        self.experiences.iter().flat_map(|e| e.labels.iter().copied()).collect()
    }
}

/// Partitions `combos` into `n_experiences` disjoint label sets (order drawn
/// from `seed`). Each experience gets `train_per_combo` fresh composites per
/// label and the matching slice of `composite_test`.
pub fn build_con_stream(
    patterns: &[ClassPattern],
    combos: &[CompositionLabel],
    composite_test: &[CompositeImage],
    n_experiences: usize,
    train_per_combo: usize,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<ExperienceStream> {
    if n_experiences == 0 || !combos.len().is_multiple_of(n_experiences) {
        return Err(Error::invalid(format!(
            "{} combinations cannot be split into {n_experiences} equal experiences",
            combos.len()
        )));
    }
    let mut order = combos.to_vec();
    order.shuffle(&mut rng_for(seed, "con/order"));
    let mut train_rng = rng_for(seed, "con/train");
    let per = combos.len() / n_experiences;
    let experiences = order
        .chunks(per)
        .enumerate()
        .map(|(id, labels)| {
            let mut labels = labels.to_vec();
            labels.sort();
            let train = build_composites(patterns, &labels, train_per_combo, cfg, &mut train_rng);
            let test = composite_test
                .iter()
                .filter(|c| labels.contains(&c.label))
                .cloned()
                .collect();
            Experience {
                id,
                labels,
                train,
                test,
            }
        })
        .collect();
    Ok(ExperienceStream { experiences })
}

/// A few-shot episode, stored as its label set and a seed so the composites
/// can be regenerated on demand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SysEpisode {
    pub id: usize,
    pub labels: Vec<CompositionLabel>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SysStream {
    pub episodes: Vec<SysEpisode>,
    pub shots: usize,
    pub queries: usize,
}

impl SysStream {
    /// Renders an episode: `shots` train and `queries` test composites per label.
    pub fn materialize(
        &self,
        episode: &SysEpisode,
        patterns: &[ClassPattern],
        cfg: &RenderConfig,
    ) -> Experience {
        let mut rng = rng_from(episode.seed);
        let train = build_composites(patterns, &episode.labels, self.shots, cfg, &mut rng);
        let test = build_composites(patterns, &episode.labels, self.queries, cfg, &mut rng);
        Experience {
            id: episode.id,
            labels: episode.labels.clone(),
            train,
            test,
        }
    }
}

/// Draws `n_experiences` independent `n_way` episodes from `universe`.
pub fn build_sys_stream<R: Rng>(
    universe: &[CompositionLabel],
    n_experiences: usize,
    n_way: usize,
    shots: usize,
    queries: usize,
    rng: &mut R,
) -> Result<SysStream> {
    if n_way > universe.len() || n_way < 2 {
        return Err(Error::invalid(format!(
            "{n_way}-way episodes need 2..={} candidate labels",
            universe.len()
        )));
    }
    if shots == 0 || queries == 0 {
        return Err(Error::invalid("episodes need at least one shot and one query"));
    }
    let episodes = (0..n_experiences)
        .map(|id| {
            let mut labels: Vec<CompositionLabel> =
                universe.choose_multiple(rng, n_way).copied().collect();
            labels.sort();
            SysEpisode {
                id,
                labels,
                seed: rng.gen(),
            }
        })
        .collect();
    Ok(SysStream {
        episodes,
        shots,
        queries,
    })
}
