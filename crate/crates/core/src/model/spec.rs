//! Architecture notation: `Family[nu,..]-[c,..]-Bmode`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MgNet,
    ResNet,
    PreactResNet,
    Gdfi,
}

impl Family {
    pub fn keyword(self) -> &'static str {
        match self {
            Family::MgNet => "MgNet",
            Family::ResNet => "ResNet",
            Family::PreactResNet => "PreactResNet",
            Family::Gdfi => "GDFI",
        }
    }

    pub fn is_resnet(self) -> bool {
        matches!(self, Family::ResNet | Family::PreactResNet)
    }

    const ALL: [Family; 4] = [Family::PreactResNet, Family::ResNet, Family::MgNet, Family::Gdfi];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    PerLevel,
    PerIteration,
}

impl Sharing {
    fn suffix(self) -> &'static str {
        match self {
            Sharing::PerLevel => "l",
            Sharing::PerIteration => "li",
        }
    }
}

/// Activation placement around a convolution `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperatorForm {
    pub activation_before: bool,
    pub activation_after: bool,
}

impl OperatorForm {
    /// `K*`
    pub const K: OperatorForm = OperatorForm { activation_before: false, activation_after: false };
    /// `K*σ`
    pub const KS: OperatorForm = OperatorForm { activation_before: true, activation_after: false };
    /// `σ∘K*`
    pub const SK: OperatorForm = OperatorForm { activation_before: false, activation_after: true };
    /// `σ∘K*σ`
    pub const SKS: OperatorForm = OperatorForm { activation_before: true, activation_after: true };

    pub const ALL: [OperatorForm; 4] = [Self::K, Self::KS, Self::SK, Self::SKS];

    pub fn token(self) -> &'static str {
        match (self.activation_after, self.activation_before) {
            (false, false) => "K",
            (false, true) => "Ks",
            (true, false) => "sK",
            (true, true) => "sKs",
        }
    }

    fn from_token(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.token() == s)
    }
}

impl fmt::Display for OperatorForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stem {
    /// 3x3 stride-1 convolution
    Cifar,
    /// 7x7 stride-2 convolution followed by 3x3 stride-2 max pooling
    Imagenet,
}

impl FromStr for Stem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar" | "cifar_style" => Ok(Stem::Cifar),
            "imagenet" | "imagenet_style" => Ok(Stem::Imagenet),
            _ => Err(Error::Config(format!("unknown stem `{s}` (expected cifar or imagenet)"))),
        }
    }
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::Cifar => "cifar",
            Stem::Imagenet => "imagenet",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub nu: Vec<usize>,
    pub channels_u: Vec<usize>,
    pub channels_f: Vec<usize>,
    pub a_sharing: Sharing,
    pub b_sharing: Sharing,
    /// Only set for GDFI.
    pub a_form: Option<OperatorForm>,
    pub b_form: Option<OperatorForm>,
    pub num_classes: usize,
    pub input_channels: usize,
    pub stem: Stem,
}

pub const GRAMMAR: &str = "FAMILY[INT,..]-[CH,..][-Al|-Ali]-(Bl|Bli)[-A:FORM-B:FORM]  \
FAMILY in {MgNet, ResNet, PreactResNet, GDFI}; CH is INT or (cu,cf); FORM in {K, Ks, sK, sKs}; \
-A:/-B: only for GDFI; -Al/-Ali only for the ResNet families (default -Ali)";

impl ModelSpec {
    pub fn levels(&self) -> usize {
        self.nu.len()
    }

    pub fn with_classes(mut self, n: usize) -> Self {
        self.num_classes = n;
        self
    }

    pub fn with_input_channels(mut self, c: usize) -> Self {
        self.input_channels = c;
        self
    }

    pub fn with_stem(mut self, stem: Stem) -> Self {
        self.stem = stem;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.nu.len();
        if j == 0 {
            return Err(Error::Validation("at least one grid is required".into()));
        }
        if self.channels_u.len() != j || self.channels_f.len() != j {
            return Err(Error::Validation(format!(
                "{} smoothing counts but {} channel entries",
                j,
                self.channels_u.len()
            )));
        }
        if let Some(l) = self.nu.iter().position(|&v| v == 0) {
            return Err(Error::Validation(format!("nu at grid {} must be at least 1", l + 1)));
        }
        if self.channels_u.iter().chain(&self.channels_f).any(|&c| c == 0) {
            return Err(Error::Validation("channel counts must be at least 1".into()));
        }
        if self.num_classes == 0 || self.input_channels == 0 {
            return Err(Error::Validation("class and input-channel counts must be at least 1".into()));
        }
        match self.family {
            Family::MgNet | Family::Gdfi => {
                if self.a_sharing != Sharing::PerLevel {
                    return Err(Error::Validation(format!("{} uses one A per grid", self.family.keyword())));
                }
            }
            Family::ResNet | Family::PreactResNet => {
                if self.channels_u != self.channels_f {
                    return Err(Error::Validation(format!(
                        "{} has a single channel count per grid",
                        self.family.keyword()
                    )));
                }
            }
        }
        let forms_ok = if self.family == Family::Gdfi {
            self.a_form.is_some() && self.b_form.is_some()
        } else {
            self.a_form.is_none() && self.b_form.is_none()
        };
        if !forms_ok {
            return Err(Error::Validation("operator forms are given exactly for GDFI".into()));
        }
        Ok(())
    }
}

impl FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_model_spec(s)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[", self.family.keyword())?;
        for (i, v) in self.nu.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]-[")?;
        let uniform = self.channels_u.iter().zip(&self.channels_f).all(|(u, v)| u == v)
            && self.channels_u.windows(2).all(|w| w[0] == w[1]);
        let entries = if uniform { 1 } else { self.channels_u.len() };
        for i in 0..entries {
            if i > 0 {
                f.write_str(",")?;
            }
            let (cu, cf) = (self.channels_u[i], self.channels_f[i]);
            if cu == cf {
                write!(f, "{cu}")?;
            } else {
                write!(f, "({cu},{cf})")?;
            }
        }
        f.write_str("]-")?;
        if self.family.is_resnet() {
            write!(f, "A{}-", self.a_sharing.suffix())?;
        }
        write!(f, "B{}", self.b_sharing.suffix())?;
        if let (Some(a), Some(b)) = (self.a_form, self.b_form) {
            write!(f, "-A:{a}-B:{b}")?;
        }
        Ok(())
    }
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse { pos: self.pos, msg: msg.into() }
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, lit: &str) -> Result<()> {
        if self.eat(lit) {
            Ok(())
        } else {
            let found = self.rest().chars().next().map(|c| format!("`{c}`")).unwrap_or_else(|| "end of input".into());
            Err(self.err(format!("expected `{lit}`, found {found}")))
        }
    }

    fn int(&mut self) -> Result<usize> {
        let digits = self.rest().bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.err("expected an integer"));
        }
        let start = self.pos;
        let v = self.rest()[..digits].parse().map_err(|_| self.err("integer out of range"))?;
        self.pos += digits;
        if v == 0 {
            return Err(Error::Parse { pos: start, msg: "value must be at least 1".into() });
        }
        Ok(v)
    }

    fn list<T>(&mut self, mut item: impl FnMut(&mut Self) -> Result<T>) -> Result<Vec<T>> {
        self.expect("[")?;
        let mut out = vec![item(self)?];
        while self.eat(",") {
            out.push(item(self)?);
        }
        self.expect("]")?;
        Ok(out)
    }

    fn channel(&mut self) -> Result<(usize, usize)> {
        if self.eat("(") {
            let cu = self.int()?;
            self.expect(",")?;
            let cf = self.int()?;
            self.expect(")")?;
            Ok((cu, cf))
        } else {
            let c = self.int()?;
            Ok((c, c))
        }
    }

    fn sharing(&mut self, letter: &str) -> Result<Sharing> {
        self.expect(letter)?;
        if self.eat("li") {
            Ok(Sharing::PerIteration)
        } else if self.eat("l") {
            Ok(Sharing::PerLevel)
        } else {
            Err(self.err(format!("expected `{letter}l` or `{letter}li`")))
        }
    }

    fn form(&mut self) -> Result<OperatorForm> {
        let len = self.rest().bytes().take_while(|b| matches!(b, b'K' | b's')).count();
        let tok = &self.rest()[..len];
        let form = OperatorForm::from_token(tok).ok_or_else(|| self.err("expected one of K, Ks, sK, sKs"))?;
        self.pos += len;
        Ok(form)
    }
}

/// Parses the notation. Defaults: 10 classes, 3 input channels, cifar stem.
pub fn parse_model_spec(text: &str) -> Result<ModelSpec> {
    let mut c = Cursor { text, pos: 0 };
    let family = Family::ALL
        .into_iter()
        .find(|f| c.eat(f.keyword()))
        .ok_or_else(|| c.err("expected a family: MgNet, ResNet, PreactResNet or GDFI"))?;
    let nu = c.list(Cursor::int)?;
    c.expect("-")?;
    let channels_at = c.pos;
    let channels = c.list(Cursor::channel)?;
    c.expect("-")?;

    let a_at = c.pos;
    let a_sharing = if c.rest().starts_with('A') {
        let s = c.sharing("A")?;
        c.expect("-")?;
        if !family.is_resnet() && s == Sharing::PerIteration {
            return Err(Error::Parse { pos: a_at, msg: format!("{} uses one A per grid", family.keyword()) });
        }
        s
    } else if family.is_resnet() {
        Sharing::PerIteration
    } else {
        Sharing::PerLevel
    };
    let b_sharing = c.sharing("B")?;

    let (mut a_form, mut b_form) = (None, None);
    if family == Family::Gdfi {
        c.expect("-A:")?;
        a_form = Some(c.form()?);
        c.expect("-B:")?;
        b_form = Some(c.form()?);
    }
    if !c.rest().is_empty() {
        return Err(c.err(format!("unexpected trailing input `{}`", c.rest())));
    }

    let j = nu.len();
    let channels = match channels.len() {
        1 => vec![channels[0]; j],
        n if n == j => channels,
        n => {
            return Err(Error::Validation(format!(
                "{j} grids in [{}] but {n} channel entries at position {channels_at}",
                nu.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            )))
        }
    };
    let spec = ModelSpec {
        family,
        nu,
        channels_u: channels.iter().map(|c| c.0).collect(),
        channels_f: channels.iter().map(|c| c.1).collect(),
        a_sharing,
        b_sharing,
        a_form,
        b_form,
        num_classes: 10,
        input_channels: 3,
        stem: Stem::Cifar,
    };
    spec.validate()?;
    Ok(spec)
}
