//! Parallel and Stack routing of hidden states through adapter banks.
//!
//! Streams are kept apart along the batch axis: a stream is one path through
//! the adapters (one bank per layer for Parallel, one bank per group per layer
//! for Stack) and never reads another stream's states.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::adapters::AdapterBanks;
use crate::backbone::{check_prefix, generate_sequence, BackboneModel, DecodeMode, Generated, HiddenStates, Side};
use crate::corpus::AttributeSchema;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::init::seeded;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompositionPlan {
    /// One stream per listed value.
    Parallel(Vec<String>),
    /// Groups applied one after another inside every layer, in this order.
    Stack(Vec<Vec<String>>),
}

impl CompositionPlan {
    /// Parses `Parallel(a,b,c)` or `Stack(Parallel(a,b),Parallel(c,d))`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut p = PlanParser { src: text.as_bytes(), pos: 0 };
        p.skip_ws();
        let head = p.ident()?;
        let plan = match head.as_str() {
            "Parallel" => CompositionPlan::Parallel(p.value_list()?),
            "Stack" => {
                p.expect(b'(')?;
                let mut groups = Vec::new();
                loop {
                    p.skip_ws();
                    let at = p.pos;
                    let inner = p.ident()?;
                    if inner != "Parallel" {
                        return Err(Error::PlanParse { position: at, message: format!("expected `Parallel`, found `{inner}`") });
                    }
                    groups.push(p.value_list()?);
                    p.skip_ws();
                    match p.next() {
                        Some(b',') => continue,
                        Some(b')') => break,
                        _ => return Err(p.error("expected `,` or `)`")),
                    }
                }
                CompositionPlan::Stack(groups)
            }
            other => return Err(Error::PlanParse { position: 0, message: format!("unknown connection `{other}`") }),
        };
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("trailing input"));
        }
        Ok(plan)
    }

    pub fn is_stack(&self) -> bool {
        matches!(self, CompositionPlan::Stack(_))
    }

    /// Every value in plan order.
    pub fn values(&self) -> Vec<&str> {
        match self {
            CompositionPlan::Parallel(v) => v.iter().map(String::as_str).collect(),
            CompositionPlan::Stack(groups) => groups.iter().flatten().map(String::as_str).collect(),
        }
    }

    /// Parallel over every value of the schema, attribute-major.
    pub fn parallel_over(schema: &AttributeSchema) -> Self {
        CompositionPlan::Parallel(schema.all_values().into_iter().map(|r| schema.value_name(r).to_string()).collect())
    }

    /// Stack with one group per attribute, in schema order.
    pub fn stack_over(schema: &AttributeSchema) -> Self {
        CompositionPlan::Stack(schema.attributes().iter().map(|a| a.values.clone()).collect())
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let values = self.values();
        if values.is_empty() {
            return Err(Error::Config("plan lists no adapters".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if schema.find_value(v).is_none() {
                return Err(Error::Config(format!("plan value `{v}` is not in the attribute schema")));
            }
            if values[..i].contains(v) {
                return Err(Error::Config(format!("plan lists `{v}` twice")));
            }
        }
        if let CompositionPlan::Stack(groups) = self {
            let mut seen = Vec::new();
            for g in groups {
                let attr = group_attribute(schema, g)?;
                if seen.contains(&attr) {
                    return Err(Error::Config(format!("attribute `{}` appears in two Stack groups", schema.attribute_name(attr))));
                }
                seen.push(attr);
            }
        }
        Ok(())
    }
}

/// The attribute a Stack group covers; the group must list exactly its values.
fn group_attribute(schema: &AttributeSchema, group: &[String]) -> Result<usize> {
    let first = group.first().ok_or_else(|| Error::Config("empty Stack group".into()))?;
    let r = schema.find_value(first).ok_or_else(|| Error::Config(format!("unknown value `{first}`")))?;
    let attr = &schema.attributes()[r.attribute];
    let covers = group.len() == attr.values.len() && attr.values.iter().all(|v| group.contains(v));
    if !covers {
        return Err(Error::Config(format!(
            "Stack group ({}) must list exactly the values of `{}`",
            group.join(","),
            attr.name
        )));
    }
    Ok(r.attribute)
}

impl fmt::Display for CompositionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionPlan::Parallel(v) => write!(f, "Parallel({})", v.join(",")),
            CompositionPlan::Stack(groups) => {
                f.write_str("Stack(")?;
                for (i, g) in groups.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "Parallel({})", g.join(","))?;
                }
                f.write_str(")")
            }
        }
    }
}

struct PlanParser<'s> {
    src: &'s [u8],
    pos: usize,
}

impl PlanParser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::PlanParse { position: self.pos, message: message.into() }
    }

    fn skip_ws(&mut self) {
        while self.src.get(self.pos).is_some_and(u8::is_ascii_whitespace) {
            self.pos += 1;
        }
    }

    fn next(&mut self) -> Option<u8> {
        let c = self.src.get(self.pos).copied();
        if c.is_some() {
            self.pos += 1;
        }
        c
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        self.skip_ws();
        if self.src.get(self.pos) == Some(&c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self
            .src
            .get(self.pos)
            .is_some_and(|c| c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-'))
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.error("expected a name"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn value_list(&mut self) -> Result<Vec<String>> {
        self.expect(b'(')?;
        let mut values = Vec::new();
        loop {
            values.push(self.ident()?);
            self.skip_ws();
            let at = self.pos;
            match self.next() {
                Some(b',') => continue,
                Some(b')') => return Ok(values),
                _ => {
                    self.pos = at;
                    return Err(self.error("expected `,` or `)`"));
                }
            }
        }
    }
}

/// Target value per attribute, e.g. `tense=future, voice=passive`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TransferDirective {
    targets: BTreeMap<String, String>,
}

impl TransferDirective {
    pub fn new<A: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (A, V)>) -> Self {
        Self { targets: pairs.into_iter().map(|(a, v)| (a.into(), v.into())).collect() }
    }

    /// Parses `attr=value` pairs separated by commas.
    pub fn parse(text: &str) -> Result<Self> {
        let mut targets = BTreeMap::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (a, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Directive(format!("`{part}` is not of the form attribute=value")))?;
            if targets.insert(a.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Directive(format!("attribute `{}` assigned twice", a.trim())));
            }
        }
        Ok(Self { targets })
    }

    pub fn get(&self, attribute: &str) -> Option<&str> {
        self.targets.get(attribute).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.targets.iter().map(|(a, v)| (a.as_str(), v.as_str()))
    }

    /// Target value index per schema attribute (`None` where unassigned).
    pub fn resolve(&self, schema: &AttributeSchema) -> Result<Vec<Option<usize>>> {
        let mut out = vec![None; schema.len()];
        for (a, v) in &self.targets {
            let ai = schema
                .attribute_index(a)
                .ok_or_else(|| Error::Directive(format!("unknown attribute `{a}`")))?;
            let vi = schema
                .value_index(ai, v)
                .ok_or_else(|| Error::Directive(format!("`{v}` is not a value of `{a}`")))?;
            out[ai] = Some(vi);
        }
        Ok(out)
    }
}

impl fmt::Display for TransferDirective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (a, v)) in self.targets.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{a}={v}")?;
        }
        Ok(())
    }
}

/// Which Stack paths to run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StackSelection {
    Targeted(TransferDirective),
    AllCombinations,
}

/// One path through the adapters: the banks applied (in order) inside every
/// layer, and the values they stand for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub assignment: Vec<String>,
    pub banks: Vec<usize>,
}

impl Route {
    pub fn tag(&self) -> String {
        self.assignment.join("+")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub assignment: Vec<String>,
    pub states: HiddenStates,
}

/// Streams in plan order; each holds the whole input batch.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub streams: Vec<Stream>,
}

impl StreamState {
    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    /// Effective batch rows, stream-major: `[stream0·row0, stream0·row1, stream1·row0, …]`.
    pub fn flattened_rows(&self) -> Vec<(String, Tensor)> {
        self.streams
            .iter()
            .flat_map(|s| (0..s.states.batch()).map(move |b| (s.assignment.join("+"), s.states.row(b))))
            .collect()
    }
}

/// Input of one routing step: a plain batch at layer 0, streams afterwards.
#[derive(Clone, Copy, Debug)]
pub enum LayerInput<'s> {
    Batch(&'s HiddenStates),
    Streams(&'s StreamState),
}

/// Applies layer `layer` of the routed adapters. A plain batch is replicated
/// once per route; an existing stream state must have one stream per route.
pub fn route_layer(layer: usize, input: LayerInput<'_>, banks: &AdapterBanks, routes: &[Route]) -> Result<StreamState> {
    if layer >= banks.config().num_layers {
        return Err(Error::Routing(format!("layer {layer} beyond the {} adapter layers", banks.config().num_layers)));
    }
    if let LayerInput::Streams(s) = input {
        if s.len() != routes.len() {
            return Err(Error::Routing(format!("{} streams for {} routes", s.len(), routes.len())));
        }
    }
    let mut streams = Vec::with_capacity(routes.len());
    for (k, route) in routes.iter().enumerate() {
        let states = match input {
            LayerInput::Batch(h) => h,
            LayerInput::Streams(s) => &s.streams[k].states,
        };
        let mut rows = Vec::with_capacity(states.batch());
        for b in 0..states.batch() {
            let mut h = states.row(b);
            for &bank in &route.banks {
                if bank >= banks.len() {
                    return Err(Error::Routing(format!("route uses bank {bank} of {}", banks.len())));
                }
                h = banks.layer(bank, layer).apply(&h)?;
            }
            rows.push(h);
        }
        streams.push(Stream { assignment: route.assignment.clone(), states: HiddenStates::from_rows(&rows, states.hidden())? });
    }
    Ok(StreamState { streams })
}

/// Parallel routing at one layer: stream `k` goes through bank `k`.
pub fn parallel_forward(layer: usize, input: LayerInput<'_>, banks: &AdapterBanks) -> Result<StreamState> {
    let routes: Vec<Route> = banks
        .values()
        .enumerate()
        .map(|(k, v)| Route { assignment: vec![v.to_string()], banks: vec![k] })
        .collect();
    route_layer(layer, input, banks, &routes)
}

/// Stack routing at one layer for the selected paths.
pub fn stack_forward(
    layer: usize,
    input: LayerInput<'_>,
    banks: &AdapterBanks,
    plan: &CompositionPlan,
    schema: &AttributeSchema,
    selection: &StackSelection,
) -> Result<StreamState> {
    let routes = plan_routes(plan, schema, banks, Some(selection))?;
    route_layer(layer, input, banks, &routes)
}

/// Routes for a plan. Parallel plans ignore `selection`; Stack plans need one.
pub fn plan_routes(
    plan: &CompositionPlan,
    schema: &AttributeSchema,
    banks: &AdapterBanks,
    selection: Option<&StackSelection>,
) -> Result<Vec<Route>> {
    let bank = |v: &str| banks.index_of(v).ok_or_else(|| Error::Wiring(format!("plan uses `{v}` but no such adapter bank was supplied")));
    match plan {
        CompositionPlan::Parallel(values) => values
            .iter()
            .map(|v| Ok(Route { assignment: vec![v.clone()], banks: vec![bank(v)?] }))
            .collect(),
        CompositionPlan::Stack(groups) => {
            let selection = selection.ok_or_else(|| Error::Directive("Stack plans need a directive or all-combinations".into()))?;
            match selection {
                StackSelection::Targeted(directive) => {
                    let targets = directive.resolve(schema)?;
                    let mut group_attrs = Vec::with_capacity(groups.len());
                    for g in groups {
                        group_attrs.push(group_attribute(schema, g)?);
                    }
                    for (a, t) in targets.iter().enumerate() {
                        if t.is_some() && !group_attrs.contains(&a) {
                            return Err(Error::Directive(format!("attribute `{}` is not part of the plan", schema.attribute_name(a))));
                        }
                    }
                    let mut route = Route { assignment: Vec::new(), banks: Vec::new() };
                    for &a in &group_attrs {
                        let v = targets[a].ok_or_else(|| {
                            Error::Directive(format!("directive assigns no value to `{}`", schema.attribute_name(a)))
                        })?;
                        let name = &schema.attributes()[a].values[v];
                        route.banks.push(bank(name)?);
                        route.assignment.push(name.clone());
                    }
                    Ok(vec![route])
                }
                StackSelection::AllCombinations => {
                    let mut routes = vec![Route { assignment: Vec::new(), banks: Vec::new() }];
                    for g in groups {
                        let mut next = Vec::with_capacity(routes.len() * g.len());
                        for r in &routes {
                            for v in g {
                                let mut r = r.clone();
                                r.banks.push(bank(v)?);
                                r.assignment.push(v.clone());
                                next.push(r);
                            }
                        }
                        routes = next;
                    }
                    Ok(routes)
                }
            }
        }
    }
}

/// A frozen backbone with adapter banks wired in by a composition plan.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub backbone: BackboneModel,
    pub banks: AdapterBanks,
    pub plan: CompositionPlan,
    pub schema: AttributeSchema,
}

/// Wires `banks` into `model` following `plan`.
pub fn inject_adapters(model: BackboneModel, banks: AdapterBanks, plan: CompositionPlan, schema: AttributeSchema) -> Result<AdaptedModel> {
    banks.config().validate_for(model.config())?;
    plan.validate(&schema)?;
    for v in plan.values() {
        if banks.index_of(v).is_none() {
            return Err(Error::Wiring(format!("plan uses `{v}` but no such adapter bank was supplied")));
        }
    }
    Ok(AdaptedModel { backbone: model, banks, plan, schema })
}

/// One generated sentence tagged with its stream.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggedOutput {
    pub assignment: Vec<String>,
    pub input: usize,
    pub output: Generated,
}

impl AdaptedModel {
    pub fn trainable_parameters(&self) -> usize {
        self.banks.parameter_count()
    }

    pub fn routes(&self, selection: Option<&StackSelection>) -> Result<Vec<Route>> {
        plan_routes(&self.plan, &self.schema, &self.banks, selection)
    }

    /// Encoder output of every route for one sentence. The embedding and the
    /// first backbone layer are shared; streams split at the first adapter.
    pub fn encode_streams_graph<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize], routes: &[Route]) -> Vec<Var> {
        let layers = self.backbone.config().encoder_layers;
        let x = self.backbone.embed(g, ids, Side::Encoder);
        let shared = self.backbone.encoder_layer(g, 0, x);
        routes
            .iter()
            .map(|route| {
                let mut h = shared;
                for l in 0..layers {
                    if l > 0 {
                        h = self.backbone.encoder_layer(g, l, h);
                    }
                    for &b in &route.banks {
                        h = self.banks.apply(g, b, l, h);
                    }
                }
                h
            })
            .collect()
    }

    /// Final decoder hidden states of one route for a prefix.
    pub fn decode_hidden_graph<'a>(&'a self, g: &mut Graph<'a>, prefix: &[usize], memory: Var, route: &Route) -> Var {
        let enc = self.backbone.config().encoder_layers;
        let mut y = self.backbone.embed(g, prefix, Side::Decoder);
        for l in 0..self.backbone.config().decoder_layers {
            y = self.backbone.decoder_layer(g, l, y, memory);
            for &b in &route.banks {
                y = self.banks.apply(g, b, enc + l, y);
            }
        }
        y
    }

    pub fn decode_stream_graph<'a>(&'a self, g: &mut Graph<'a>, prefix: &[usize], memory: Var, route: &Route) -> Var {
        let y = self.decode_hidden_graph(g, prefix, memory, route);
        self.backbone.project(g, y)
    }

    /// Encoder stream states for a batch, stream-major.
    pub fn encode(&self, batch: &[Vec<usize>], selection: Option<&StackSelection>) -> Result<StreamState> {
        let routes = self.routes(selection)?;
        let mut per_stream: Vec<Vec<Tensor>> = vec![Vec::with_capacity(batch.len()); routes.len()];
        for ids in batch {
            self.backbone.check_tokens(ids)?;
            let mut g = Graph::inference();
            let outs = self.encode_streams_graph(&mut g, ids, &routes);
            for (k, v) in outs.into_iter().enumerate() {
                per_stream[k].push(g.value(v).clone());
            }
        }
        let hidden = self.backbone.config().hidden_dim;
        let streams = routes
            .iter()
            .zip(per_stream)
            .map(|(r, rows)| Ok(Stream { assignment: r.assignment.clone(), states: HiddenStates::from_rows(&rows, hidden)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(StreamState { streams })
    }

    /// Logits of one route for a prefix given that route's encoder output.
    pub fn decode(&self, memory: &Tensor, prefix: &[usize], route: &Route) -> Result<Tensor> {
        check_prefix(&self.backbone, prefix)?;
        let mut g = Graph::inference();
        let m = g.constant_ref(memory);
        let logits = self.decode_stream_graph(&mut g, prefix, m, route);
        Ok(g.value(logits).clone())
    }

    /// Next-token logits for a prefix (only the last position is projected).
    pub fn next_logits(&self, memory: &Tensor, prefix: &[usize], route: &Route) -> Result<Vec<f64>> {
        check_prefix(&self.backbone, prefix)?;
        let mut g = Graph::inference();
        let m = g.constant_ref(memory);
        let y = self.decode_hidden_graph(&mut g, prefix, m, route);
        let y = g.value(y);
        Ok(self.backbone.project_row(y.row(y.rows() - 1)))
    }

    /// Decodes one sequence for a route from its encoder output.
    pub fn generate_one(&self, memory: &Tensor, route: &Route, mode: DecodeMode, max_len: usize, rng: &mut crate::init::SeededRng) -> Result<Generated> {
        let limit = max_len.min(self.backbone.config().max_len.saturating_sub(1));
        let mut step = |prefix: &[usize]| self.next_logits(memory, prefix, route);
        generate_sequence(&mut step, mode, limit, rng)
    }

    /// Runs every stream over every input and returns tagged outputs,
    /// stream-major in plan order.
    pub fn streams_to_outputs(
        &self,
        batch: &[Vec<usize>],
        selection: Option<&StackSelection>,
        mode: DecodeMode,
        max_len: usize,
        seed: u64,
    ) -> Result<Vec<TaggedOutput>> {
        let routes = self.routes(selection)?;
        let states = self.encode(batch, selection)?;
        let mut rng = seeded(seed);
        let mut out = Vec::with_capacity(routes.len() * batch.len());
        for (route, stream) in routes.iter().zip(&states.streams) {
            for b in 0..batch.len() {
                let memory = stream.states.row(b);
                let output = self.generate_one(&memory, route, mode, max_len, &mut rng)?;
                out.push(TaggedOutput { assignment: route.assignment.clone(), input: b, output });
            }
        }
        Ok(out)
    }
}
