//! Scenario-aware routing: classify the interference, dispatch to the
//! matching expert and, for noise predictions, optionally confirm the label
//! against the universal model before trusting the noise expert.

use std::fmt;
use std::path::{Path, PathBuf};

use crate::classifier::{Classifier, ScenarioPrediction};
use crate::error::{invalid, CoreError, Result};
use crate::gridnet::Extractor;
use crate::loss::si_sdr_loss;
use crate::scene::{Scenario, Scene};
use crate::visual::FaceTrack;

/// Anything that maps a mixture and face track to a target estimate.
pub trait Separator {
    fn separate(&self, mixture: &[f64], face: &FaceTrack) -> Result<Vec<f64>>;
}

pub trait ScenarioPredictor {
    fn predict(&self, mixture: &[f64], face: &FaceTrack) -> Result<ScenarioPrediction>;
}

impl Separator for Extractor {
    fn separate(&self, mixture: &[f64], face: &FaceTrack) -> Result<Vec<f64>> {
        self.extract_samples(mixture, Some(face))
    }
}

impl ScenarioPredictor for Classifier {
    fn predict(&self, mixture: &[f64], face: &FaceTrack) -> Result<ScenarioPrediction> {
        self.predict_samples(mixture, face)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    Plain,
    Pp1,
    Pp2,
    Oracle,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Plain, Strategy::Pp1, Strategy::Pp2, Strategy::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Pp1 => "pp1",
            Strategy::Pp2 => "pp2",
            Strategy::Oracle => "oracle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelRole {
    Universal,
    ExpertSpeech,
    ExpertNoise,
}

impl ModelRole {
    pub const ALL: [ModelRole; 3] = [ModelRole::Universal, ModelRole::ExpertSpeech, ModelRole::ExpertNoise];

    pub fn name(self) -> &'static str {
        match self {
            ModelRole::Universal => "universal",
            ModelRole::ExpertSpeech => "expert_speech",
            ModelRole::ExpertNoise => "expert_noise",
        }
    }

    /// Accepts the full names and the short forms `speech` / `noise`.
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "speech" => Some(ModelRole::ExpertSpeech),
            "noise" => Some(ModelRole::ExpertNoise),
            _ => Self::ALL.into_iter().find(|v| v.name() == s),
        }
    }

    /// Scenario this role trains on; `None` means both.
    pub fn scenario(self) -> Option<Scenario> {
        match self {
            ModelRole::Universal => None,
            ModelRole::ExpertSpeech => Some(Scenario::Speech),
            ModelRole::ExpertNoise => Some(Scenario::Noise),
        }
    }

    pub fn expert_for(s: Scenario) -> Self {
        match s {
            Scenario::Speech => ModelRole::ExpertSpeech,
            Scenario::Noise => ModelRole::ExpertNoise,
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub scene_id: String,
    /// Classifier probability; `None` under oracle routing.
    pub prob: Option<f64>,
    /// Label the dispatch started from (ground truth under oracle routing).
    pub classifier_label: Scenario,
    /// Universal output agrees more with the noise expert than the speech expert.
    pub agreement: Option<bool>,
    /// Mixture lies further from the noise expert's output than from the speech expert's.
    pub divergence: Option<bool>,
    pub final_label: Scenario,
    pub chosen: ModelRole,
}

/// Label-confirmation tests on the three candidate outputs and the mixture.
/// Equal losses leave the noise label unconfirmed.
pub fn agreement_holds(universal: &[f64], noise_out: &[f64], speech_out: &[f64]) -> Result<bool> {
    Ok(si_sdr_loss(universal, noise_out)? < si_sdr_loss(universal, speech_out)?)
}

pub fn divergence_holds(mixture: &[f64], noise_out: &[f64], speech_out: &[f64]) -> Result<bool> {
    Ok(si_sdr_loss(mixture, noise_out)? > si_sdr_loss(mixture, speech_out)?)
}

/// Universal model, two experts and the classifier, each trained on its own.
pub struct ExpertBundle {
    pub universal: Box<dyn Separator>,
    pub expert_speech: Box<dyn Separator>,
    pub expert_noise: Box<dyn Separator>,
    pub classifier: Box<dyn ScenarioPredictor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BundlePaths {
    pub universal: PathBuf,
    pub expert_speech: PathBuf,
    pub expert_noise: PathBuf,
    pub classifier: PathBuf,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CoreError::Config(format!("{what} checkpoint {} not found", path.display())))
    }
}

impl ExpertBundle {
    pub fn model(&self, role: ModelRole) -> &dyn Separator {
        match role {
            ModelRole::Universal => self.universal.as_ref(),
            ModelRole::ExpertSpeech => self.expert_speech.as_ref(),
            ModelRole::ExpertNoise => self.expert_noise.as_ref(),
        }
    }

    /// Loads four checkpoints and checks that they can share inputs.
    pub fn load(paths: &BundlePaths) -> Result<Self> {
        require(&paths.universal, "universal")?;
        require(&paths.expert_speech, "speech expert")?;
        require(&paths.expert_noise, "noise expert")?;
        require(&paths.classifier, "classifier")?;
        let (u, _) = Extractor::load(&paths.universal)?;
        let (s, _) = Extractor::load(&paths.expert_speech)?;
        let (n, _) = Extractor::load(&paths.expert_noise)?;
        let (c, _) = Classifier::load(&paths.classifier)?;
        Self::from_models(u, s, n, c)
    }

    pub fn from_models(universal: Extractor, speech: Extractor, noise: Extractor, classifier: Classifier) -> Result<Self> {
        let face = |e: &Extractor| e.config().visual.as_ref().map(|v| (v.height, v.width));
        let cls_face = Some((classifier.config().visual.height, classifier.config().visual.width));
        for (name, e) in [("speech expert", &speech), ("noise expert", &noise)] {
            if e.config().stft != universal.config().stft || face(e) != face(&universal) {
                return Err(CoreError::Config(format!("{name} is incompatible with the universal model")));
            }
        }
        if face(&universal).is_some_and(|f| Some(f) != cls_face) {
            return Err(CoreError::Config("classifier expects a different face track size".into()));
        }
        Ok(Self {
            universal: Box::new(universal),
            expert_speech: Box::new(speech),
            expert_noise: Box::new(noise),
            classifier: Box::new(classifier),
        })
    }

    /// Routes one mixture. `truth` is needed only by oracle routing.
    pub fn route(
        &self,
        strategy: Strategy,
        scene_id: &str,
        mixture: &[f64],
        face: &FaceTrack,
        truth: Option<Scenario>,
    ) -> Result<(Vec<f64>, RoutingDecision)> {
        let (prob, label) = match strategy {
            Strategy::Oracle => match truth {
                Some(t) => (None, t),
                None => return invalid(format!("oracle routing of {scene_id} needs a ground-truth label")),
            },
            _ => {
                let p = self.classifier.predict(mixture, face)?;
                (Some(p.prob), p.label)
            }
        };
        let mut d = RoutingDecision {
            scene_id: scene_id.to_string(),
            prob,
            classifier_label: label,
            agreement: None,
            divergence: None,
            final_label: label,
            chosen: ModelRole::expert_for(label),
        };
        let confirm = matches!(strategy, Strategy::Pp1 | Strategy::Pp2) && label == Scenario::Noise;
        if !confirm {
            let out = self.model(d.chosen).separate(mixture, face)?;
            return Ok((out, d));
        }
        let universal = self.universal.separate(mixture, face)?;
        let noise_out = self.expert_noise.separate(mixture, face)?;
        let speech_out = self.expert_speech.separate(mixture, face)?;
        let agreement = agreement_holds(&universal, &noise_out, &speech_out)?;
        d.agreement = Some(agreement);
        let mut confirmed = agreement;
        if strategy == Strategy::Pp2 && !agreement {
            let divergence = divergence_holds(mixture, &noise_out, &speech_out)?;
            d.divergence = Some(divergence);
            confirmed = divergence;
        }
        if confirmed {
            Ok((noise_out, d))
        } else {
            d.final_label = Scenario::Speech;
            d.chosen = ModelRole::Universal;
            Ok((universal, d))
        }
    }

    pub fn route_scene(&self, strategy: Strategy, scene: &Scene) -> Result<(Vec<f64>, RoutingDecision)> {
        self.route(strategy, &scene.scene_id, &scene.mixture.samples, &scene.face_track, Some(scene.scenario))
    }

    /// Routes every scene; results are ordered by scene id.
    pub fn batch_route(&self, scenes: &[Scene], strategy: Strategy) -> Result<Vec<(Vec<f64>, RoutingDecision)>> {
        let mut order: Vec<&Scene> = scenes.iter().collect();
        order.sort_by(|a, b| a.scene_id.cmp(&b.scene_id));
        order.into_iter().map(|s| self.route_scene(strategy, s)).collect()
    }
}

const TRAIL_HEADER: [&str; 7] = ["scene_id", "y_hat", "classifier_label", "agreement", "divergence", "final_label", "chosen_model"];

fn trail_err(detail: impl Into<String>) -> CoreError {
    CoreError::Format {
        kind: "decision trail",
        detail: detail.into(),
    }
}

fn opt_bool(b: Option<bool>) -> &'static str {
    match b {
        None => "-",
        Some(true) => "true",
        Some(false) => "false",
    }
}

/// Tab-separated decision records with a header; `-` marks values not computed.
pub fn format_trail(decisions: &[RoutingDecision]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
    w.write_record(TRAIL_HEADER).map_err(|e| trail_err(e.to_string()))?;
    for d in decisions {
        w.write_record([
            d.scene_id.clone(),
            d.prob.map_or("-".into(), |p| p.to_string()),
            d.classifier_label.name().into(),
            opt_bool(d.agreement).into(),
            opt_bool(d.divergence).into(),
            d.final_label.name().into(),
            d.chosen.name().into(),
        ])
        .map_err(|e| trail_err(e.to_string()))?;
    }
    w.into_inner().map_err(|e| trail_err(e.to_string()))
}

pub fn parse_trail(bytes: &[u8]) -> Result<Vec<RoutingDecision>> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(bytes);
    let header = r.headers().map_err(|e| trail_err(e.to_string()))?;
    if header.iter().ne(TRAIL_HEADER) {
        return Err(trail_err("unexpected header"));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| trail_err(e.to_string()))?;
        let at = |m: String| trail_err(format!("row {}: {m}", i + 1));
        if rec.len() != TRAIL_HEADER.len() {
            return Err(at(format!("{} fields", rec.len())));
        }
        let label = |f: &str| Scenario::from_name(f).ok_or_else(|| at(format!("label {f:?}")));
        let flag = |f: &str| match f {
            "-" => Ok(None),
            "true" => Ok(Some(true)),
            "false" => Ok(Some(false)),
            _ => Err(at(format!("flag {f:?}"))),
        };
        let prob = match &rec[1] {
            "-" => None,
            p => {
                let v: f64 = p.parse().map_err(|_| at(format!("probability {p:?}")))?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(at(format!("probability {v} outside [0, 1]")));
                }
                Some(v)
            }
        };
        let d = RoutingDecision {
            scene_id: rec[0].to_string(),
            prob,
            classifier_label: label(&rec[2])?,
            agreement: flag(&rec[3])?,
            divergence: flag(&rec[4])?,
            final_label: label(&rec[5])?,
            chosen: ModelRole::from_name(&rec[6]).ok_or_else(|| at(format!("model {:?}", &rec[6])))?,
        };
        if d.chosen == ModelRole::ExpertNoise && d.final_label != Scenario::Noise {
            return Err(at("noise expert chosen without a noise label".into()));
        }
        out.push(d);
    }
    Ok(out)
}
