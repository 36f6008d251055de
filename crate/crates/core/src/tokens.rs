//! Token dictionaries and conversion between surface text and token
//! sequences for dates and ages.
//!
//! A date sequence is always emitted in canonical token order
//! `<Start> day-digits <DayMonthSeparator> month <MonthYearSeparator>
//! year-digits <End>` regardless of the surface order of the input text.
//! Digits are kept verbatim (no leading-zero normalisation); two-digit years
//! stay two-digit and are flagged ambiguous downstream.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

/// Maximum (padded) sequence length per dictionary kind.
pub const DATE_MAX_LEN: usize = 11;
pub const AGE_MAX_LEN: usize = 4;

pub const MONTH_NAMES: [&str; 12] = [
    "January",
    "February",
    "March",
    "April",
    "May",
    "June",
    "July",
    "August",
    "September",
    "October",
    "November",
    "December",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokensError {
    #[error("empty input")]
    EmptyInput,
    #[error("unparseable {kind} text {text:?}: {reason}")]
    Unparseable { kind: &'static str, text: String, reason: String },
    #[error("day {0} out of range 1..=31")]
    DayOutOfRange(u32),
    #[error("month {0} out of range 1..=12")]
    MonthOutOfRange(u32),
    #[error("year must have 2 or 4 digits, got {0:?}")]
    BadYear(String),
    #[error("non-integer age {0:?}")]
    NonIntegerAge(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("invalid calendar date {day}-{month}-{year}")]
    InvalidCalendarDate { day: u32, month: u32, year: String },
    #[error("expected a {expected:?} sequence, got {got:?}")]
    WrongDictionary { expected: DictKind, got: DictKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DictKind {
    Date,
    Age,
}

impl DictKind {
    pub fn max_len(&self) -> usize {
        match self {
            DictKind::Date => DATE_MAX_LEN,
            DictKind::Age => AGE_MAX_LEN,
        }
    }
}

impl std::str::FromStr for DictKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "date" => Ok(DictKind::Date),
            "age" => Ok(DictKind::Age),
            other => Err(format!("unknown dictionary kind {other:?} (expected date|age)")),
        }
    }
}

/// A token space: ordered token names plus the start/end/pad roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dictionary {
    kind: DictKind,
    tokens: Vec<String>,
    start_id: TokenId,
    end_id: TokenId,
    pad_id: TokenId,
}

impl Dictionary {
    pub fn kind(&self) -> DictKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == name)
    }

    pub fn start_id(&self) -> TokenId {
        self.start_id
    }

    pub fn end_id(&self) -> TokenId {
        self.end_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn max_len(&self) -> usize {
        self.kind.max_len()
    }
}

/// The 27-token date dictionary: ten digits, twelve months, the two
/// component separators, and the padding/start/end markers.
pub fn date_dictionary() -> Dictionary {
    let mut tokens: Vec<String> = (0..10).map(|d| format!("<{d}>")).collect();
    tokens.extend(MONTH_NAMES.iter().map(|m| format!("<{m}>")));
    tokens.push("<DayMonthSeparator>".into());
    tokens.push("<MonthYearSeparator>".into());
    tokens.push("<Padding>".into());
    tokens.push("<Start>".into());
    tokens.push("<End>".into());
    Dictionary { kind: DictKind::Date, tokens, start_id: 25, end_id: 26, pad_id: 24 }
}

/// The 13-token age dictionary: start, ten digits, end, padding.
pub fn age_dictionary() -> Dictionary {
    let mut tokens: Vec<String> = vec!["<Start>".into()];
    tokens.extend((0..10).map(|d| format!("<{d}>")));
    tokens.push("<End>".into());
    tokens.push("<Padding>".into());
    Dictionary { kind: DictKind::Age, tokens, start_id: 0, end_id: 11, pad_id: 12 }
}

pub fn dictionary_for(kind: DictKind) -> Dictionary {
    match kind {
        DictKind::Date => date_dictionary(),
        DictKind::Age => age_dictionary(),
    }
}

mod date_ids {
    use super::TokenId;
    pub fn digit(d: u32) -> TokenId {
        d as TokenId
    }
    pub fn month(m: u32) -> TokenId {
        9 + m as TokenId // month 1 -> id 10
    }
    pub const DAY_MONTH_SEP: TokenId = 22;
    pub const MONTH_YEAR_SEP: TokenId = 23;
}

mod age_ids {
    use super::TokenId;
    pub fn digit(d: u32) -> TokenId {
        1 + d as TokenId
    }
}

/// A validated token sequence: starts with `<Start>`, contains exactly one
/// `<End>`, only `<Padding>` after the end, and fits the dictionary's
/// maximum length.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
    kind: DictKind,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, kind: DictKind) -> Result<Self, TokensError> {
        let dict = dictionary_for(kind);
        if ids.len() > dict.max_len() {
            return Err(TokensError::SequenceTooLong { len: ids.len(), max: dict.max_len() });
        }
        if ids.first() != Some(&dict.start_id()) {
            return Err(TokensError::MalformedSequence("must begin with <Start>".into()));
        }
        if ids.iter().any(|&id| id >= dict.len()) {
            return Err(TokensError::MalformedSequence("token id out of dictionary".into()));
        }
        let end_count = ids.iter().filter(|&&id| id == dict.end_id()).count();
        if end_count != 1 {
            return Err(TokensError::MalformedSequence(format!(
                "expected exactly one <End>, found {end_count}"
            )));
        }
        let end_pos = ids.iter().position(|&id| id == dict.end_id()).unwrap();
        if ids[end_pos + 1..].iter().any(|&id| id != dict.pad_id()) {
            return Err(TokensError::MalformedSequence("non-padding token after <End>".into()));
        }
        if ids[1..end_pos].iter().any(|&id| id == dict.start_id() || id == dict.pad_id()) {
            return Err(TokensError::MalformedSequence(
                "<Start>/<Padding> inside the sequence body".into(),
            ));
        }
        Ok(TokenSequence { ids, kind })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn kind(&self) -> DictKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Token ids strictly between `<Start>` and `<End>`.
    pub fn body(&self) -> &[TokenId] {
        let dict = dictionary_for(self.kind);
        let end = self.ids.iter().position(|&id| id == dict.end_id()).unwrap();
        &self.ids[1..end]
    }

    /// Copy padded with `<Padding>` to exactly `len` tokens.
    pub fn padded(&self, len: usize) -> Vec<TokenId> {
        let dict = dictionary_for(self.kind);
        let mut out = self.ids.clone();
        while out.len() < len {
            out.push(dict.pad_id());
        }
        out
    }

    /// Render as the dictionary's token names, e.g. for debugging or CSV.
    pub fn names(&self) -> Vec<String> {
        let dict = dictionary_for(self.kind);
        self.ids.iter().map(|&id| dict.name(id).unwrap().to_string()).collect()
    }
}

/// Month-name lookup table; the default covers English and Danish full names
/// plus common abbreviations, all matched case-insensitively.
#[derive(Debug, Clone)]
pub struct MonthNames {
    /// (surface form lowercased, month 1..=12)
    entries: Vec<(String, u32)>,
}

impl Default for MonthNames {
    fn default() -> Self {
        let mut entries = Vec::new();
        let mut add = |name: &str, m: u32| entries.push((name.to_lowercase(), m));
        for (i, name) in MONTH_NAMES.iter().enumerate() {
            add(name, i as u32 + 1);
        }
        let danish = [
            "Januar", "Februar", "Marts", "April", "Maj", "Juni", "Juli", "August", "September",
            "Oktober", "November", "December",
        ];
        for (i, name) in danish.iter().enumerate() {
            add(name, i as u32 + 1);
        }
        let abbrevs = [
            ("Jan", 1),
            ("Feb", 2),
            ("Mar", 3),
            ("Mts", 3),
            ("Apr", 4),
            ("Jun", 6),
            ("Jul", 7),
            ("Aug", 8),
            ("Sep", 9),
            ("Sept", 9),
            ("Okt", 10),
            ("Oct", 10),
            ("Nov", 11),
            ("Dec", 12),
        ];
        for (name, m) in abbrevs {
            add(name, m);
        }
        MonthNames { entries }
    }
}

impl MonthNames {
    pub fn with_entries(entries: Vec<(String, u32)>) -> Self {
        MonthNames { entries }
    }

    pub fn lookup(&self, s: &str) -> Option<u32> {
        let lower = s.to_lowercase();
        self.entries.iter().find(|(n, _)| *n == lower).map(|&(_, m)| m)
    }
}

/// Parsed surface date before token emission: component values plus the
/// verbatim digit strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DateParts {
    pub day: u32,
    pub month: u32,
    /// Day digits exactly as written ("01" stays "01").
    pub day_digits: String,
    /// Year digits exactly as written; two or four of them.
    pub year_digits: String,
}

impl DateParts {
    pub fn year_is_two_digit(&self) -> bool {
        self.year_digits.len() == 2
    }

    pub fn year_value(&self) -> u32 {
        self.year_digits.parse().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Group {
    Digits(String),
    Month(u32),
}

fn split_groups(
    s: &str,
    months: &MonthNames,
    kind: &'static str,
) -> Result<Vec<Group>, TokensError> {
    let err = |reason: &str| TokensError::Unparseable {
        kind,
        text: s.to_string(),
        reason: reason.to_string(),
    };
    let mut raw = Vec::new();
    let mut cur = String::new();
    for ch in s.chars().chain(std::iter::once(' ')) {
        if ch.is_alphanumeric() {
            cur.push(ch);
        } else if "/-., \t\n\r".contains(ch) {
            if !cur.is_empty() {
                raw.push(std::mem::take(&mut cur));
            }
        } else {
            return Err(err(&format!("unexpected character {ch:?}")));
        }
    }
    raw.into_iter()
        .map(|g| {
            if g.chars().all(|c| c.is_ascii_digit()) {
                Ok(Group::Digits(g))
            } else if g.chars().all(|c| c.is_alphabetic()) {
                months
                    .lookup(&g)
                    .map(Group::Month)
                    .ok_or_else(|| err(&format!("unknown month name {g:?}")))
            } else {
                // digits with an ordinal suffix, e.g. "20th"
                let digits: String = g.chars().take_while(|c| c.is_ascii_digit()).collect();
                let suffix: String = g.chars().skip(digits.len()).collect();
                let ordinal = matches!(suffix.to_lowercase().as_str(), "st" | "nd" | "rd" | "th");
                if !digits.is_empty() && ordinal {
                    Ok(Group::Digits(digits))
                } else {
                    Err(err(&format!("cannot interpret group {g:?}")))
                }
            }
        })
        .collect()
}

/// Parse a surface date into components using the default month table.
pub fn parse_date(s: &str) -> Result<DateParts, TokensError> {
    parse_date_with(s, &MonthNames::default())
}

/// All-numeric dates are day-first; a month name may come first or second
/// ("September 20th, 90" and "20 September 90" both work).
pub fn parse_date_with(s: &str, months: &MonthNames) -> Result<DateParts, TokensError> {
    if s.trim().is_empty() {
        return Err(TokensError::EmptyInput);
    }
    let err = |reason: &str| TokensError::Unparseable {
        kind: "date",
        text: s.to_string(),
        reason: reason.to_string(),
    };
    let groups = split_groups(s, months, "date")?;
    if groups.len() != 3 {
        return Err(err(&format!("expected 3 components, found {}", groups.len())));
    }
    let (day_digits, month, year_digits) = match (&groups[0], &groups[1], &groups[2]) {
        (Group::Digits(d), Group::Digits(m), Group::Digits(y)) => {
            let mv: u32 = m.parse().map_err(|_| err("month digits out of range"))?;
            if m.len() > 2 || mv == 0 || mv > 12 {
                return Err(TokensError::MonthOutOfRange(mv));
            }
            (d.clone(), mv, y.clone())
        }
        (Group::Digits(d), Group::Month(m), Group::Digits(y)) => (d.clone(), *m, y.clone()),
        (Group::Month(m), Group::Digits(d), Group::Digits(y)) => (d.clone(), *m, y.clone()),
        _ => return Err(err("unsupported component arrangement")),
    };
    if day_digits.len() > 2 {
        return Err(err("day has more than two digits"));
    }
    let day: u32 = day_digits.parse().map_err(|_| err("bad day digits"))?;
    if day == 0 || day > 31 {
        return Err(TokensError::DayOutOfRange(day));
    }
    if year_digits.len() != 2 && year_digits.len() != 4 {
        return Err(TokensError::BadYear(year_digits));
    }
    Ok(DateParts { day, month, day_digits, year_digits })
}

/// Tokenise a surface date into the canonical date sequence.
pub fn tokenize_date(s: &str) -> Result<TokenSequence, TokensError> {
    tokenize_date_with(s, &MonthNames::default())
}

pub fn tokenize_date_with(s: &str, months: &MonthNames) -> Result<TokenSequence, TokensError> {
    let parts = parse_date_with(s, months)?;
    let dict = date_dictionary();
    let mut ids = vec![dict.start_id()];
    for ch in parts.day_digits.chars() {
        ids.push(date_ids::digit(ch.to_digit(10).unwrap()));
    }
    ids.push(date_ids::DAY_MONTH_SEP);
    ids.push(date_ids::month(parts.month));
    ids.push(date_ids::MONTH_YEAR_SEP);
    for ch in parts.year_digits.chars() {
        ids.push(date_ids::digit(ch.to_digit(10).unwrap()));
    }
    ids.push(dict.end_id());
    TokenSequence::new(ids, DictKind::Date)
}

/// Tokenise a nonnegative integer age; digits are kept verbatim. Fractions
/// ("1/2") and suffixes are rejected.
pub fn tokenize_age(s: &str) -> Result<TokenSequence, TokensError> {
    let t = s.trim();
    if t.is_empty() {
        return Err(TokensError::EmptyInput);
    }
    if !t.chars().all(|c| c.is_ascii_digit()) {
        return Err(TokensError::NonIntegerAge(s.to_string()));
    }
    let dict = age_dictionary();
    let mut ids = vec![dict.start_id()];
    for ch in t.chars() {
        ids.push(age_ids::digit(ch.to_digit(10).unwrap()));
    }
    ids.push(dict.end_id());
    TokenSequence::new(ids, DictKind::Age)
}

pub fn tokenize(s: &str, kind: DictKind) -> Result<TokenSequence, TokensError> {
    match kind {
        DictKind::Date => tokenize_date(s),
        DictKind::Age => tokenize_age(s),
    }
}

/// Extract date components back out of a date sequence.
pub fn date_parts_from_sequence(seq: &TokenSequence) -> Result<DateParts, TokensError> {
    if seq.kind() != DictKind::Date {
        return Err(TokensError::WrongDictionary { expected: DictKind::Date, got: seq.kind() });
    }
    let body = seq.body();
    let sep1 = body
        .iter()
        .position(|&id| id == date_ids::DAY_MONTH_SEP)
        .ok_or_else(|| TokensError::MalformedSequence("missing <DayMonthSeparator>".into()))?;
    let sep2 = body
        .iter()
        .position(|&id| id == date_ids::MONTH_YEAR_SEP)
        .ok_or_else(|| TokensError::MalformedSequence("missing <MonthYearSeparator>".into()))?;
    if sep2 != sep1 + 2 {
        return Err(TokensError::MalformedSequence("month must be a single token".into()));
    }
    let digit_of = |id: TokenId| -> Result<char, TokensError> {
        if id < 10 {
            Ok(char::from_digit(id as u32, 10).unwrap())
        } else {
            Err(TokensError::MalformedSequence(format!("expected digit token, got id {id}")))
        }
    };
    let day_digits: String =
        body[..sep1].iter().map(|&id| digit_of(id)).collect::<Result<_, _>>()?;
    let month_id = body[sep1 + 1];
    if !(10..22).contains(&month_id) {
        return Err(TokensError::MalformedSequence("expected month token".into()));
    }
    let month = (month_id - 9) as u32;
    let year_digits: String =
        body[sep2 + 1..].iter().map(|&id| digit_of(id)).collect::<Result<_, _>>()?;
    if day_digits.is_empty() || day_digits.len() > 2 {
        return Err(TokensError::MalformedSequence("day must have 1 or 2 digit tokens".into()));
    }
    if year_digits.len() != 2 && year_digits.len() != 4 {
        return Err(TokensError::BadYear(year_digits));
    }
    let day: u32 = day_digits.parse().unwrap();
    if day == 0 || day > 31 {
        return Err(TokensError::DayOutOfRange(day));
    }
    Ok(DateParts { day, month, day_digits, year_digits })
}

/// Canonical text form: `D-<MonthName>-Y` for dates, plain numerals for
/// ages. `tokenize(detokenize(x)) == x`.
pub fn detokenize(seq: &TokenSequence) -> Result<String, TokensError> {
    match seq.kind() {
        DictKind::Date => {
            let parts = date_parts_from_sequence(seq)?;
            Ok(format!(
                "{}-{}-{}",
                parts.day_digits,
                MONTH_NAMES[parts.month as usize - 1],
                parts.year_digits
            ))
        }
        DictKind::Age => {
            let digits: String = seq
                .body()
                .iter()
                .map(|&id| {
                    if (1..11).contains(&id) {
                        Ok(char::from_digit(id as u32 - 1, 10).unwrap())
                    } else {
                        Err(TokensError::MalformedSequence(format!(
                            "expected age digit token, got id {id}"
                        )))
                    }
                })
                .collect::<Result<_, _>>()?;
            if digits.is_empty() {
                return Err(TokensError::MalformedSequence("empty age body".into()));
            }
            Ok(digits)
        }
    }
}

/// Format-insensitive date equality: day and month compared numerically,
/// years compared numerically only within the same digit class (a two-digit
/// year never equals a four-digit year; the century is not guessed).
pub fn date_parts_equivalent(a: &DateParts, b: &DateParts) -> bool {
    a.day == b.day
        && a.month == b.month
        && a.year_digits.len() == b.year_digits.len()
        && a.year_value() == b.year_value()
}

/// Text-level convenience over [`date_parts_equivalent`].
pub fn dates_equivalent(a: &str, b: &str) -> Result<bool, TokensError> {
    Ok(date_parts_equivalent(&parse_date(a)?, &parse_date(b)?))
}

/// A calendar-valid date. Two-digit years are carried verbatim and flagged
/// ambiguous; leap-day validation then allows Feb 29 (either century could
/// be a leap year).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CivilDate {
    pub day: u8,
    pub month: u8,
    pub year: Year,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Year {
    Full(u16),
    /// Last two digits only; the century is unknown.
    TwoDigit(u8),
}

impl Year {
    pub fn is_ambiguous(&self) -> bool {
        matches!(self, Year::TwoDigit(_))
    }
}

pub fn is_leap_year(year: u16) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

pub fn days_in_month(month: u8, year: u16) -> u8 {
    match month {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        2 => {
            if is_leap_year(year) {
                29
            } else {
                28
            }
        }
        _ => 0,
    }
}

impl CivilDate {
    pub fn new(day: u32, month: u32, year: Year) -> Result<Self, TokensError> {
        let year_text = match year {
            Year::Full(y) => format!("{y:04}"),
            Year::TwoDigit(y) => format!("{y:02}"),
        };
        let invalid = || TokensError::InvalidCalendarDate { day, month, year: year_text.clone() };
        if !(1..=12).contains(&month) {
            return Err(invalid());
        }
        let max_day = match year {
            Year::Full(y) => days_in_month(month as u8, y),
            // unknown century: be permissive about Feb 29
            Year::TwoDigit(_) => {
                if month == 2 {
                    29
                } else {
                    days_in_month(month as u8, 1)
                }
            }
        };
        if day == 0 || day > max_day as u32 {
            return Err(invalid());
        }
        Ok(CivilDate { day: day as u8, month: month as u8, year })
    }

    pub fn from_parts(parts: &DateParts) -> Result<Self, TokensError> {
        let year = if parts.year_is_two_digit() {
            Year::TwoDigit(parts.year_value() as u8)
        } else {
            Year::Full(parts.year_value() as u16)
        };
        CivilDate::new(parts.day, parts.month, year)
    }

    pub fn parse(s: &str) -> Result<Self, TokensError> {
        CivilDate::from_parts(&parse_date(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(seq: &TokenSequence) -> Vec<String> {
        seq.names()
    }

    #[test]
    fn date_dictionary_shape() {
        let d = date_dictionary();
        assert_eq!(d.len(), 27);
        assert!(d.id_of("<DayMonthSeparator>").is_some());
        assert!(d.id_of("<MonthYearSeparator>").is_some());
        assert!(d.id_of("<Padding>").is_some());
        // token names unique
        let mut sorted = d.tokens().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 27);
        assert_ne!(d.start_id(), d.end_id());
        assert_ne!(d.start_id(), d.pad_id());
    }

    #[test]
    fn age_dictionary_shape() {
        let d = age_dictionary();
        assert_eq!(d.len(), 13);
        let mut sorted = d.tokens().to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 13);
    }

    #[test]
    fn tokenize_date_slash_dash() {
        let seq = tokenize_date("1/7-2010").unwrap();
        assert_eq!(
            names(&seq),
            vec![
                "<Start>",
                "<1>",
                "<DayMonthSeparator>",
                "<July>",
                "<MonthYearSeparator>",
                "<2>",
                "<0>",
                "<1>",
                "<0>",
                "<End>"
            ]
        );
    }

    #[test]
    fn tokenize_date_month_name_first_ordinal_two_digit_year() {
        let seq = tokenize_date("September 20th, 90").unwrap();
        assert_eq!(
            names(&seq),
            vec![
                "<Start>",
                "<2>",
                "<0>",
                "<DayMonthSeparator>",
                "<September>",
                "<MonthYearSeparator>",
                "<9>",
                "<0>",
                "<End>"
            ]
        );
    }

    #[test]
    fn tokenize_date_rejects_bad_input() {
        assert_eq!(tokenize_date(""), Err(TokensError::EmptyInput));
        assert!(matches!(tokenize_date("32/1-1900"), Err(TokensError::DayOutOfRange(32))));
        assert!(matches!(tokenize_date("1/13-1900"), Err(TokensError::MonthOutOfRange(13))));
        assert!(matches!(tokenize_date("1/7-190"), Err(TokensError::BadYear(_))));
        assert!(matches!(tokenize_date("hello"), Err(TokensError::Unparseable { .. })));
    }

    #[test]
    fn numeric_dates_parse_day_first() {
        let parts = parse_date("3/4-1920").unwrap();
        assert_eq!((parts.day, parts.month), (3, 4));
    }

    #[test]
    fn danish_month_names_parse() {
        let seq = tokenize_date("5 marts 1899").unwrap();
        assert!(names(&seq).contains(&"<March>".to_string()));
        let seq = tokenize_date("5. okt. 1899").unwrap();
        assert!(names(&seq).contains(&"<October>".to_string()));
    }

    #[test]
    fn tokenize_age_basic() {
        let seq = tokenize_age("12").unwrap();
        assert_eq!(names(&seq), vec!["<Start>", "<1>", "<2>", "<End>"]);
        let seq = tokenize_age("0").unwrap();
        assert_eq!(names(&seq), vec!["<Start>", "<0>", "<End>"]);
    }

    #[test]
    fn tokenize_age_rejects_fractions_and_suffixes() {
        assert!(matches!(tokenize_age("1/2"), Err(TokensError::NonIntegerAge(_))));
        assert!(matches!(tokenize_age("12 years"), Err(TokensError::NonIntegerAge(_))));
        assert!(matches!(tokenize_age("-3"), Err(TokensError::NonIntegerAge(_))));
    }

    #[test]
    fn age_sequence_respects_max_len() {
        // T = 4: three digit tokens no longer fit
        assert!(matches!(tokenize_age("100"), Err(TokensError::SequenceTooLong { .. })));
    }

    #[test]
    fn detokenize_canonical_forms() {
        let seq = tokenize_date("1/7-2010").unwrap();
        assert_eq!(detokenize(&seq).unwrap(), "1-July-2010");
        let seq = tokenize_age("12").unwrap();
        assert_eq!(detokenize(&seq).unwrap(), "12");
        // leading zeros preserved
        let seq = tokenize_date("01/7-2010").unwrap();
        assert_eq!(detokenize(&seq).unwrap(), "01-July-2010");
    }

    #[test]
    fn sequence_validation_rejects_malformed() {
        let dict = date_dictionary();
        // missing <End>
        assert!(TokenSequence::new(vec![dict.start_id(), 1, 2], DictKind::Date).is_err());
        // padding before <End>
        assert!(TokenSequence::new(
            vec![dict.start_id(), 1, dict.pad_id(), dict.end_id()],
            DictKind::Date
        )
        .is_err());
        // missing <Start>
        assert!(TokenSequence::new(vec![1, 2, dict.end_id()], DictKind::Date).is_err());
        // two <End>
        assert!(TokenSequence::new(
            vec![dict.start_id(), dict.end_id(), dict.end_id()],
            DictKind::Date
        )
        .is_err());
    }

    fn random_date_text(rng: &mut ChaCha8Rng) -> String {
        let day = rng.random_range(1..=31u32);
        let month = rng.random_range(1..=12u32);
        let year = if rng.random_bool(0.3) {
            format!("{:02}", rng.random_range(0..100))
        } else {
            format!("{}", rng.random_range(1000..2100))
        };
        let day_txt =
            if rng.random_bool(0.3) && day < 10 { format!("0{day}") } else { day.to_string() };
        let seps = ["/", "-", ".", " ", ", "];
        let s1 = seps[rng.random_range(0..seps.len())];
        let s2 = seps[rng.random_range(0..seps.len())];
        match rng.random_range(0..3u8) {
            0 => format!("{day_txt}{s1}{month}{s2}{year}"),
            1 => format!("{day_txt}{s1}{}{s2}{year}", MONTH_NAMES[month as usize - 1]),
            _ => format!("{} {day_txt}{s2}{year}", MONTH_NAMES[month as usize - 1]),
        }
    }

    #[test]
    fn ten_thousand_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for i in 0..10_000 {
            let text = random_date_text(&mut rng);
            let seq = tokenize_date(&text)
                .unwrap_or_else(|e| panic!("sample {i} {text:?} failed to tokenize: {e}"));
            let canonical = detokenize(&seq).unwrap();
            let again = tokenize_date(&canonical).unwrap();
            assert_eq!(seq, again, "round-trip failed for {text:?} -> {canonical:?}");
        }
    }

    #[test]
    fn age_round_trips() {
        for age in 0..100u32 {
            let seq = tokenize_age(&age.to_string()).unwrap();
            assert_eq!(detokenize(&seq).unwrap(), age.to_string());
        }
        // verbatim leading zero
        let seq = tokenize_age("07").unwrap();
        assert_eq!(detokenize(&seq).unwrap(), "07");
    }

    #[test]
    fn equivalence_case_table() {
        let cases = [
            ("01-10-2000", "1/10-2000", true),
            ("01-3-2000", "1/3-2000", true),
            ("1-10-2000", "2-10-2000", false),
            ("1-10-2000", "1-11-2000", false),
            ("1-10-90", "1-10-1890", false), // the century is never guessed
            ("1-10-90", "1/10/90", true),
            ("1 October 2000", "01-10-2000", true),
            ("1-10-1990", "1-10-1890", false),
            ("05-05-05", "5/5-05", true),
        ];
        for (a, b, want) in cases {
            assert_eq!(dates_equivalent(a, b).unwrap(), want, "{a:?} vs {b:?}");
        }
        assert!(dates_equivalent("nonsense", "1-10-2000").is_err());
    }

    #[test]
    fn equivalence_is_an_equivalence_relation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let texts: Vec<String> = (0..40)
            .map(|_| {
                let day = rng.random_range(1..=4u32); // narrow pools force collisions
                let month = rng.random_range(1..=3u32);
                let year = 1850 + rng.random_range(0..3u32);
                if rng.random_bool(0.5) {
                    format!("0{day}/{month}-{year}")
                } else {
                    format!("{day}/{month}-{year}")
                }
            })
            .collect();
        let parsed: Vec<DateParts> = texts.iter().map(|t| parse_date(t).unwrap()).collect();
        for a in &parsed {
            assert!(date_parts_equivalent(a, a));
            for b in &parsed {
                assert_eq!(date_parts_equivalent(a, b), date_parts_equivalent(b, a));
                for c in &parsed {
                    if date_parts_equivalent(a, b) && date_parts_equivalent(b, c) {
                        assert!(date_parts_equivalent(a, c));
                    }
                }
            }
        }
    }

    #[test]
    fn civil_date_validation() {
        assert!(CivilDate::new(29, 2, Year::Full(2000)).is_ok());
        assert!(CivilDate::new(29, 2, Year::Full(1900)).is_err()); // not a leap year
        assert!(CivilDate::new(29, 2, Year::TwoDigit(0)).is_ok()); // century unknown
        assert!(CivilDate::new(31, 4, Year::Full(1900)).is_err());
        assert!(CivilDate::new(0, 1, Year::Full(1900)).is_err());
        let d = CivilDate::parse("29/2-1904").unwrap();
        assert_eq!((d.day, d.month), (29, 2));
        assert!(!d.year.is_ambiguous());
        assert!(CivilDate::parse("1-7-90").unwrap().year.is_ambiguous());
    }

    #[test]
    fn fuzzed_inputs_never_build_malformed_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..2000 {
            let len = rng.random_range(0..12usize);
            let text: String = (0..len)
                .map(|_| {
                    let pool = b"0123456789/-. ,abcdefghijxyzseptember";
                    pool[rng.random_range(0..pool.len())] as char
                })
                .collect();
            if let Ok(seq) = tokenize_date(&text) {
                // whatever parsed must re-validate and round-trip
                assert!(TokenSequence::new(seq.ids().to_vec(), DictKind::Date).is_ok());
                let canonical = detokenize(&seq).unwrap();
                assert_eq!(tokenize_date(&canonical).unwrap(), seq);
            }
            if let Ok(seq) = tokenize_age(&text) {
                assert!(TokenSequence::new(seq.ids().to_vec(), DictKind::Age).is_ok());
            }
        }
    }
}
