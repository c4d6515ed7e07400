//! Line-based file formats: tab-separated, one record per line, one-line
//! versioned header. Floats use shortest round-trip formatting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::click::{ProductKey, ProductStats};
use crate::conv::{ClickRecord, ConversionRecord};
use crate::error::{Error, Result};
use crate::eval::BucketDay;
use crate::offset::{Event, EventKind};
use crate::serving::{Assets, CampaignInfo, Device};
use crate::trendy::{Gender, ImpressionRecord, PixelEvent, PixelKind};
use crate::Cents;

pub const EVENT_FEED_HEADER: &str = "#event-feed\tv1";
pub const CATALOG_HEADER: &str = "#catalog\tv1";
pub const USERS_HEADER: &str = "#users\tv1";
pub const CAMPAIGNS_HEADER: &str = "#campaigns\tv1";
pub const IMPRESSIONS_HEADER: &str = "#impressions\tv1";
pub const CLICKS_HEADER: &str = "#clicks\tv1";
pub const CONVERSIONS_HEADER: &str = "#conversions\tv1";
pub const PIXEL_HEADER: &str = "#pixel\tv1";
pub const THRESHOLDS_HEADER: &str = "#thresholds\tv1";
pub const BUCKET_HEADER: &str = "#bucket\tv1";

fn perr(path: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        msg: msg.into(),
    }
}

/// Write `items` under a one-line header.
pub fn write_lines<T>(
    path: impl AsRef<Path>,
    header: &str,
    items: impl IntoIterator<Item = T>,
    mut fmt: impl FnMut(&T) -> String,
) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{header}")?;
    for item in items {
        writeln!(out, "{}", fmt(&item))?;
    }
    Ok(())
}

/// Read a headered file line by line.
pub fn read_lines<T>(
    path: impl AsRef<Path>,
    header: &str,
    mut parse: impl FnMut(&str, usize) -> Result<T>,
) -> Result<Vec<T>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != header {
                return Err(perr(&display, 1, format!("expected header {header:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        out.push(parse(&line, i + 1)?);
    }
    Ok(out)
}

fn fields<'a>(line: &'a str, n: usize, path: &str, lineno: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = line.split('\t').collect();
    if parts.len() != n {
        return Err(perr(
            path,
            lineno,
            format!("expected {n} tab-separated fields, got {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn opt(s: &str) -> &str {
    if s.is_empty() {
        "-"
    } else {
        s
    }
}

fn parse_age(s: &str, path: &str, line: usize) -> Result<Option<u32>> {
    if s == "-" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| perr(path, line, format!("bad age {s:?}")))
}

fn parse_gender(s: &str, path: &str, line: usize) -> Result<Gender> {
    Gender::parse(s).ok_or_else(|| perr(path, line, format!("bad gender {s:?}")))
}

// ---------------------------------------------------------------------------
// Event feed: timestamp, kind, label, user fields, ad fields, sim bins.
// User fields are `name=value:weight(|value:weight)*`, space-separated;
// ad fields `name=value`; sim bins `name=bin`. Empty groups are `-`.
// ---------------------------------------------------------------------------

pub fn format_event(event: &Event) -> String {
    let mut user = String::new();
    for (i, (name, values)) in event.user_values.iter().enumerate() {
        if i > 0 {
            user.push(' ');
        }
        let _ = write!(user, "{name}=");
        for (j, (value, weight)) in values.iter().enumerate() {
            if j > 0 {
                user.push('|');
            }
            let _ = write!(user, "{value}:{weight}");
        }
    }
    let ad = event
        .ad_values
        .iter()
        .map(|(n, v)| format!("{n}={v}"))
        .collect::<Vec<_>>()
        .join(" ");
    let sims = event
        .sim_bins
        .iter()
        .map(|(n, b)| format!("{n}={b}"))
        .collect::<Vec<_>>()
        .join(" ");
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        event.timestamp,
        event.kind.as_str(),
        event.label,
        opt(&user),
        opt(&ad),
        opt(&sims)
    )
}

pub fn parse_event(line: &str, path: &str, lineno: usize) -> Result<Event> {
    let parts = fields(line, 6, path, lineno)?;
    let timestamp = parts[0]
        .parse()
        .map_err(|_| perr(path, lineno, "bad timestamp"))?;
    let kind = EventKind::parse(parts[1])
        .ok_or_else(|| perr(path, lineno, format!("bad kind {:?}", parts[1])))?;
    let label: u8 = parts[2]
        .parse()
        .map_err(|_| perr(path, lineno, "bad label"))?;
    if label > 1 {
        return Err(perr(path, lineno, format!("label {label} not in {{0,1}}")));
    }

    let mut event = Event::new(kind, label, timestamp);
    if parts[3] != "-" {
        for field in parts[3].split(' ') {
            let (name, rest) = field
                .split_once('=')
                .ok_or_else(|| perr(path, lineno, format!("bad user field {field:?}")))?;
            let mut values = Vec::new();
            for piece in rest.split('|') {
                let (value, weight) = piece
                    .rsplit_once(':')
                    .ok_or_else(|| perr(path, lineno, format!("bad value:weight {piece:?}")))?;
                let weight: f64 = weight
                    .parse()
                    .map_err(|_| perr(path, lineno, format!("bad weight {weight:?}")))?;
                values.push((value.to_string(), weight));
            }
            event.user_values.insert(name.to_string(), values);
        }
    }
    if parts[4] != "-" {
        for field in parts[4].split(' ') {
            let (name, value) = field
                .split_once('=')
                .ok_or_else(|| perr(path, lineno, format!("bad ad field {field:?}")))?;
            event.ad_values.insert(name.to_string(), value.to_string());
        }
    }
    if parts[5] != "-" {
        for field in parts[5].split(' ') {
            let (name, bin) = field
                .split_once('=')
                .ok_or_else(|| perr(path, lineno, format!("bad sim bin {field:?}")))?;
            event.sim_bins.insert(name.to_string(), bin.to_string());
        }
    }
    Ok(event)
}

pub fn write_event_feed(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    write_lines(path, EVENT_FEED_HEADER, events, format_event)
}

pub fn read_event_feed(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, EVENT_FEED_HEADER, |line, n| {
        parse_event(line, &display, n)
    })
}

// ---------------------------------------------------------------------------
// Catalog: product path, stats, assets.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub key: ProductKey,
    pub stats: ProductStats,
    pub assets: Assets,
}

pub fn format_catalog_entry(e: &CatalogEntry) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.key.advertiser_id,
        e.key.product_set_id,
        e.key.product_group_id,
        e.key.product_id,
        e.stats.impressions,
        e.stats.clicks,
        e.stats.conversions,
        e.stats.spend,
        e.stats.last_seen_day,
        e.assets.title,
        e.assets.image_ref,
        e.assets.description
    )
}

pub fn parse_catalog_entry(line: &str, path: &str, lineno: usize) -> Result<CatalogEntry> {
    let p = fields(line, 12, path, lineno)?;
    let int = |s: &str, what: &str| -> Result<u64> {
        s.parse()
            .map_err(|_| perr(path, lineno, format!("bad {what} {s:?}")))
    };
    Ok(CatalogEntry {
        key: ProductKey::new(p[0], p[1], p[2], p[3]),
        stats: ProductStats {
            impressions: int(p[4], "impressions")?,
            clicks: int(p[5], "clicks")?,
            conversions: int(p[6], "conversions")?,
            spend: int(p[7], "spend")? as Cents,
            last_seen_day: int(p[8], "day")? as u32,
        },
        assets: Assets {
            title: p[9].to_string(),
            image_ref: p[10].to_string(),
            description: p[11].to_string(),
        },
    })
}

pub fn write_catalog(path: impl AsRef<Path>, entries: &[CatalogEntry]) -> Result<()> {
    write_lines(path, CATALOG_HEADER, entries, format_catalog_entry)
}

pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<CatalogEntry>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, CATALOG_HEADER, |line, n| {
        parse_catalog_entry(line, &display, n)
    })
}

// ---------------------------------------------------------------------------
// Users.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub user_id: String,
    pub age: Option<u32>,
    pub gender: Gender,
    pub mobile: bool,
    pub impression_history_bin: String,
    pub preferred_sections: Vec<String>,
    pub techno: Vec<String>,
    pub clicked_categories: Vec<String>,
    pub mobile_activities: Vec<String>,
    pub ctr_advertisers: Vec<String>,
    pub ctr_campaigns: Vec<String>,
    pub clicked_product_categories: Vec<String>,
}

fn join_list(list: &[String]) -> String {
    if list.is_empty() {
        "-".to_string()
    } else {
        list.join(",")
    }
}

fn split_list(s: &str) -> Vec<String> {
    if s == "-" {
        Vec::new()
    } else {
        s.split(',').map(str::to_string).collect()
    }
}

pub fn format_user(u: &UserProfile) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        u.user_id,
        u.age.map_or("-".to_string(), |a| a.to_string()),
        u.gender.as_str(),
        if u.mobile { "m" } else { "d" },
        u.impression_history_bin,
        join_list(&u.preferred_sections),
        join_list(&u.techno),
        join_list(&u.clicked_categories),
        join_list(&u.mobile_activities),
        join_list(&u.ctr_advertisers),
        join_list(&u.ctr_campaigns),
        join_list(&u.clicked_product_categories),
    )
}

pub fn parse_user(line: &str, path: &str, lineno: usize) -> Result<UserProfile> {
    let p = fields(line, 12, path, lineno)?;
    Ok(UserProfile {
        user_id: p[0].to_string(),
        age: parse_age(p[1], path, lineno)?,
        gender: parse_gender(p[2], path, lineno)?,
        mobile: p[3] == "m",
        impression_history_bin: p[4].to_string(),
        preferred_sections: split_list(p[5]),
        techno: split_list(p[6]),
        clicked_categories: split_list(p[7]),
        mobile_activities: split_list(p[8]),
        ctr_advertisers: split_list(p[9]),
        ctr_campaigns: split_list(p[10]),
        clicked_product_categories: split_list(p[11]),
    })
}

pub fn write_users(path: impl AsRef<Path>, users: &[UserProfile]) -> Result<()> {
    write_lines(path, USERS_HEADER, users, format_user)
}

pub fn read_users(path: impl AsRef<Path>) -> Result<Vec<UserProfile>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, USERS_HEADER, |line, n| parse_user(line, &display, n))
}

// ---------------------------------------------------------------------------
// Campaigns (keyed by product group).
// ---------------------------------------------------------------------------

pub fn format_campaign(c: &CampaignInfo) -> String {
    let genders = if c.target_genders.is_empty() {
        "-".to_string()
    } else {
        c.target_genders
            .iter()
            .map(|g| g.as_str().to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    let blocked = if c.blocked_page_sections.is_empty() {
        "-".to_string()
    } else {
        c.blocked_page_sections
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(",")
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        c.product_group_id,
        c.advertiser_id,
        c.bid_product_group,
        c.budget_remaining,
        genders,
        c.expiration_ts,
        blocked
    )
}

pub fn parse_campaign(line: &str, path: &str, lineno: usize) -> Result<CampaignInfo> {
    let p = fields(line, 7, path, lineno)?;
    let target_genders = if p[4] == "-" {
        Vec::new()
    } else {
        p[4].split(',')
            .map(|g| parse_gender(g, path, lineno))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(CampaignInfo {
        product_group_id: p[0].to_string(),
        advertiser_id: p[1].to_string(),
        bid_product_group: p[2]
            .parse()
            .map_err(|_| perr(path, lineno, "bad bid"))?,
        budget_remaining: p[3]
            .parse()
            .map_err(|_| perr(path, lineno, "bad budget"))?,
        target_genders,
        expiration_ts: p[5]
            .parse()
            .map_err(|_| perr(path, lineno, "bad expiration"))?,
        blocked_page_sections: split_list(p[6]).into_iter().collect(),
    })
}

pub fn write_campaigns(path: impl AsRef<Path>, campaigns: &[CampaignInfo]) -> Result<()> {
    write_lines(path, CAMPAIGNS_HEADER, campaigns, format_campaign)
}

pub fn read_campaigns(path: impl AsRef<Path>) -> Result<Vec<CampaignInfo>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, CAMPAIGNS_HEADER, |line, n| {
        parse_campaign(line, &display, n)
    })
}

// ---------------------------------------------------------------------------
// Impressions: the rich per-impression record behind click-model training,
// negatives sampling, and request synthesis.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionRow {
    pub timestamp: i64,
    pub user_id: String,
    pub age: Option<u32>,
    pub gender: Gender,
    pub page_section: String,
    pub device: Device,
    pub slot: usize,
    pub dpa_type: String,
    pub product: ProductKey,
    pub frequency_bin: String,
    pub recency_bin: String,
    pub clicked: bool,
}

impl ImpressionRow {
    pub fn as_impression_record(&self) -> ImpressionRecord {
        ImpressionRecord {
            timestamp: self.timestamp,
            user_id: self.user_id.clone(),
            age: self.age,
            gender: self.gender,
            page_section: self.page_section.clone(),
        }
    }
}

pub fn format_impression(r: &ImpressionRow) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        r.timestamp,
        r.user_id,
        r.age.map_or("-".to_string(), |a| a.to_string()),
        r.gender.as_str(),
        r.page_section,
        match r.device {
            Device::Mobile => "m",
            Device::Desktop => "d",
        },
        r.slot,
        r.dpa_type,
        r.product.advertiser_id,
        r.product.product_set_id,
        r.product.product_group_id,
        r.product.product_id,
        r.frequency_bin,
        r.recency_bin,
        u8::from(r.clicked),
    )
}

pub fn parse_impression(line: &str, path: &str, lineno: usize) -> Result<ImpressionRow> {
    let p = fields(line, 15, path, lineno)?;
    Ok(ImpressionRow {
        timestamp: p[0]
            .parse()
            .map_err(|_| perr(path, lineno, "bad timestamp"))?,
        user_id: p[1].to_string(),
        age: parse_age(p[2], path, lineno)?,
        gender: parse_gender(p[3], path, lineno)?,
        page_section: p[4].to_string(),
        device: match p[5] {
            "m" => Device::Mobile,
            "d" => Device::Desktop,
            other => return Err(perr(path, lineno, format!("bad device {other:?}"))),
        },
        slot: p[6].parse().map_err(|_| perr(path, lineno, "bad slot"))?,
        dpa_type: p[7].to_string(),
        product: ProductKey::new(p[8], p[9], p[10], p[11]),
        frequency_bin: p[12].to_string(),
        recency_bin: p[13].to_string(),
        clicked: p[14] == "1",
    })
}

pub fn write_impressions(path: impl AsRef<Path>, rows: &[ImpressionRow]) -> Result<()> {
    write_lines(path, IMPRESSIONS_HEADER, rows, format_impression)
}

pub fn read_impressions(path: impl AsRef<Path>) -> Result<Vec<ImpressionRow>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, IMPRESSIONS_HEADER, |line, n| {
        parse_impression(line, &display, n)
    })
}

// ---------------------------------------------------------------------------
// Clicks (conversion-model click feed) and conversions.
// ---------------------------------------------------------------------------

pub fn format_click(c: &ClickRecord) -> String {
    let mut user = String::new();
    for (i, (name, values)) in c.user_values.iter().enumerate() {
        if i > 0 {
            user.push(' ');
        }
        let _ = write!(user, "{name}=");
        for (j, (value, weight)) in values.iter().enumerate() {
            if j > 0 {
                user.push('|');
            }
            let _ = write!(user, "{value}:{weight}");
        }
    }
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        c.timestamp,
        c.user_id,
        c.product.advertiser_id,
        c.product.product_set_id,
        c.product.product_group_id,
        c.product.product_id,
        opt(&user)
    )
}

pub fn parse_click(line: &str, path: &str, lineno: usize) -> Result<ClickRecord> {
    let p = fields(line, 7, path, lineno)?;
    let mut user_values = BTreeMap::new();
    if p[6] != "-" {
        for field in p[6].split(' ') {
            let (name, rest) = field
                .split_once('=')
                .ok_or_else(|| perr(path, lineno, format!("bad user field {field:?}")))?;
            let mut values = Vec::new();
            for piece in rest.split('|') {
                let (value, weight) = piece
                    .rsplit_once(':')
                    .ok_or_else(|| perr(path, lineno, format!("bad value:weight {piece:?}")))?;
                values.push((
                    value.to_string(),
                    weight
                        .parse()
                        .map_err(|_| perr(path, lineno, "bad weight"))?,
                ));
            }
            user_values.insert(name.to_string(), values);
        }
    }
    Ok(ClickRecord {
        timestamp: p[0]
            .parse()
            .map_err(|_| perr(path, lineno, "bad timestamp"))?,
        user_id: p[1].to_string(),
        product: ProductKey::new(p[2], p[3], p[4], p[5]),
        user_values,
    })
}

pub fn write_clicks(path: impl AsRef<Path>, clicks: &[ClickRecord]) -> Result<()> {
    write_lines(path, CLICKS_HEADER, clicks, format_click)
}

pub fn read_clicks(path: impl AsRef<Path>) -> Result<Vec<ClickRecord>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, CLICKS_HEADER, |line, n| parse_click(line, &display, n))
}

pub fn format_conversion(c: &ConversionRecord) -> String {
    format!("{}\t{}\t{}", c.timestamp, c.user_id, c.product_id)
}

pub fn parse_conversion(line: &str, path: &str, lineno: usize) -> Result<ConversionRecord> {
    let p = fields(line, 3, path, lineno)?;
    Ok(ConversionRecord {
        timestamp: p[0]
            .parse()
            .map_err(|_| perr(path, lineno, "bad timestamp"))?,
        user_id: p[1].to_string(),
        product_id: p[2].to_string(),
    })
}

pub fn write_conversions(path: impl AsRef<Path>, convs: &[ConversionRecord]) -> Result<()> {
    write_lines(path, CONVERSIONS_HEADER, convs, format_conversion)
}

pub fn read_conversions(path: impl AsRef<Path>) -> Result<Vec<ConversionRecord>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, CONVERSIONS_HEADER, |line, n| {
        parse_conversion(line, &display, n)
    })
}

// ---------------------------------------------------------------------------
// Pixel feed.
// ---------------------------------------------------------------------------

pub fn format_pixel(e: &PixelEvent) -> String {
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        e.timestamp,
        e.user_id,
        e.age.map_or("-".to_string(), |a| a.to_string()),
        e.gender.as_str(),
        e.product.advertiser_id,
        e.product.product_set_id,
        e.product.product_group_id,
        e.product.product_id,
        e.kind.as_str(),
    )
}

pub fn parse_pixel(line: &str, path: &str, lineno: usize) -> Result<PixelEvent> {
    let p = fields(line, 9, path, lineno)?;
    Ok(PixelEvent {
        timestamp: p[0]
            .parse()
            .map_err(|_| perr(path, lineno, "bad timestamp"))?,
        user_id: p[1].to_string(),
        age: parse_age(p[2], path, lineno)?,
        gender: parse_gender(p[3], path, lineno)?,
        product: ProductKey::new(p[4], p[5], p[6], p[7]),
        kind: PixelKind::parse(p[8])
            .ok_or_else(|| perr(path, lineno, format!("bad pixel kind {:?}", p[8])))?,
    })
}

pub fn write_pixel(path: impl AsRef<Path>, events: &[PixelEvent]) -> Result<()> {
    write_lines(path, PIXEL_HEADER, events, format_pixel)
}

pub fn read_pixel(path: impl AsRef<Path>) -> Result<Vec<PixelEvent>> {
    let display = path.as_ref().display().to_string();
    read_lines(path, PIXEL_HEADER, |line, n| parse_pixel(line, &display, n))
}

// ---------------------------------------------------------------------------
// Thresholds manifest: advertiser -> (threshold, requested percentile).
// ---------------------------------------------------------------------------

pub fn write_thresholds(
    path: impl AsRef<Path>,
    thresholds: &BTreeMap<String, (f64, f64)>,
) -> Result<()> {
    write_lines(
        path,
        THRESHOLDS_HEADER,
        thresholds.iter(),
        |(adv, (t, pct))| format!("{adv}\t{t}\t{pct}"),
    )
}

pub fn read_thresholds(path: impl AsRef<Path>) -> Result<BTreeMap<String, (f64, f64)>> {
    let display = path.as_ref().display().to_string();
    let rows = read_lines(path, THRESHOLDS_HEADER, |line, n| {
        let p = fields(line, 3, &display, n)?;
        let t: f64 = p[1]
            .parse()
            .map_err(|_| perr(&display, n, "bad threshold"))?;
        let pct: f64 = p[2]
            .parse()
            .map_err(|_| perr(&display, n, "bad percentile"))?;
        Ok((p[0].to_string(), (t, pct)))
    })?;
    Ok(rows.into_iter().collect())
}

// ---------------------------------------------------------------------------
// Bucket days: day summary plus per-advertiser lines.
// ---------------------------------------------------------------------------

pub fn write_bucket_day(path: impl AsRef<Path>, day: &BucketDay) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{BUCKET_HEADER}")?;
    writeln!(out, "day\t{}\t{}\t{}", day.day, day.spend, day.impressions)?;
    for (adv, (spend, conversions)) in &day.advertisers {
        writeln!(out, "adv\t{adv}\t{spend}\t{conversions}")?;
    }
    Ok(())
}

pub fn read_bucket_day(path: impl AsRef<Path>) -> Result<BucketDay> {
    let display = path.as_ref().display().to_string();
    let file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut day: Option<BucketDay> = None;
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line != BUCKET_HEADER {
                return Err(perr(&display, 1, "bad bucket header"));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let p: Vec<&str> = line.split('\t').collect();
        match p[0] {
            "day" if p.len() == 4 => {
                day = Some(BucketDay {
                    day: p[1].parse().map_err(|_| perr(&display, i + 1, "bad day"))?,
                    spend: p[2]
                        .parse()
                        .map_err(|_| perr(&display, i + 1, "bad spend"))?,
                    impressions: p[3]
                        .parse()
                        .map_err(|_| perr(&display, i + 1, "bad impressions"))?,
                    advertisers: BTreeMap::new(),
                });
            }
            "adv" if p.len() == 4 => {
                let day = day
                    .as_mut()
                    .ok_or_else(|| perr(&display, i + 1, "adv line before day line"))?;
                day.advertisers.insert(
                    p[1].to_string(),
                    (
                        p[2].parse()
                            .map_err(|_| perr(&display, i + 1, "bad spend"))?,
                        p[3].parse()
                            .map_err(|_| perr(&display, i + 1, "bad conversions"))?,
                    ),
                );
            }
            other => return Err(perr(&display, i + 1, format!("unknown record {other:?}"))),
        }
    }
    day.ok_or_else(|| perr(&display, 1, "bucket file without day line"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_name() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9-]{0,8}".prop_map(|s| s)
    }

    fn arb_event() -> impl Strategy<Value = Event> {
        (
            -1_000_000i64..1_000_000,
            0u8..=1,
            prop::collection::btree_map(
                arb_name(),
                prop::collection::vec(("[a-z0-9_.]{1,6}", -10.0f64..10.0), 1..4),
                0..3,
            ),
            prop::collection::btree_map(arb_name(), "[a-z0-9_.@]{1,8}", 0..3),
            prop::collection::btree_map(arb_name(), "[a-z0-9_<>+-]{1,8}", 0..3),
        )
            .prop_map(|(ts, label, user, ad, sims)| Event {
                user_values: user,
                ad_values: ad,
                sim_bins: sims,
                label,
                kind: EventKind::Click,
                timestamp: ts,
            })
    }

    proptest! {
        #[test]
        fn event_feed_round_trips(event in arb_event()) {
            let line = format_event(&event);
            let parsed = parse_event(&line, "mem", 2).unwrap();
            prop_assert_eq!(parsed, event);
        }
    }

    #[test]
    fn impression_row_round_trips() {
        let row = ImpressionRow {
            timestamp: 123,
            user_id: "u7".into(),
            age: Some(34),
            gender: Gender::Female,
            page_section: "sec12".into(),
            device: Device::Mobile,
            slot: 2,
            dpa_type: "retargeting".into(),
            product: ProductKey::new("a0", "a0-s1", "a0-s1-g0", "a0-s1-g0-p3"),
            frequency_bin: "3-5".into(),
            recency_bin: "<1d".into(),
            clicked: true,
        };
        let parsed = parse_impression(&format_impression(&row), "mem", 2).unwrap();
        assert_eq!(parsed, row);

        let unknown = ImpressionRow {
            age: None,
            gender: Gender::Unknown,
            clicked: false,
            ..row
        };
        let parsed = parse_impression(&format_impression(&unknown), "mem", 2).unwrap();
        assert_eq!(parsed, unknown);
    }

    #[test]
    fn catalog_and_campaign_round_trip() {
        let entry = CatalogEntry {
            key: ProductKey::new("a0", "s0", "g0", "p0"),
            stats: ProductStats {
                impressions: 1500,
                clicks: 30,
                conversions: 3,
                spend: 900,
                last_seen_day: 6,
            },
            assets: Assets {
                title: "Widget 9 (deluxe)".into(),
                image_ref: "img://p0.jpg".into(),
                description: "A widget, but deluxe.".into(),
            },
        };
        let parsed = parse_catalog_entry(&format_catalog_entry(&entry), "mem", 2).unwrap();
        assert_eq!(parsed, entry);

        let campaign = CampaignInfo {
            advertiser_id: "a0".into(),
            product_group_id: "g0".into(),
            bid_product_group: 45,
            budget_remaining: 100_000,
            target_genders: vec![Gender::Female],
            expiration_ts: 1_999_999,
            blocked_page_sections: ["sec3".to_string()].into_iter().collect(),
        };
        let parsed = parse_campaign(&format_campaign(&campaign), "mem", 2).unwrap();
        assert_eq!(parsed, campaign);
    }

    #[test]
    fn pixel_and_conversion_round_trip() {
        let e = PixelEvent {
            timestamp: 777,
            user_id: "u1".into(),
            age: None,
            gender: Gender::Unknown,
            product: ProductKey::new("a", "s", "g", "p"),
            kind: PixelKind::AddToCart,
        };
        assert_eq!(parse_pixel(&format_pixel(&e), "mem", 2).unwrap(), e);

        let c = ConversionRecord {
            timestamp: 5,
            user_id: "u9".into(),
            product_id: "p3".into(),
        };
        assert_eq!(parse_conversion(&format_conversion(&c), "mem", 2).unwrap(), c);
    }

    #[test]
    fn files_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let events: Vec<Event> = (0..20)
            .map(|i| {
                Event::new(EventKind::Skip, (i % 2) as u8, i)
                    .with_user("age", vec![("20-24".into(), 1.0)])
                    .with_user("cats", vec![("c1".into(), 0.5), ("c2".into(), 2.0)])
                    .with_ad("product-id", &format!("p{i}"))
                    .with_sim("recency", "<1h")
            })
            .collect();
        let path = dir.path().join("events.tsv");
        write_event_feed(&path, &events).unwrap();
        assert_eq!(read_event_feed(&path).unwrap(), events);

        let thresholds: BTreeMap<String, (f64, f64)> =
            [("a0".to_string(), (0.73, 5.0)), ("a1".to_string(), (0.2, 10.0))]
                .into_iter()
                .collect();
        let tpath = dir.path().join("thresholds.tsv");
        write_thresholds(&tpath, &thresholds).unwrap();
        assert_eq!(read_thresholds(&tpath).unwrap(), thresholds);

        let bucket = BucketDay {
            day: 3,
            spend: 12345,
            impressions: 999,
            advertisers: [("a0".to_string(), (100, 2))].into_iter().collect(),
        };
        let bpath = dir.path().join("bucket.tsv");
        write_bucket_day(&bpath, &bucket).unwrap();
        assert_eq!(read_bucket_day(&bpath).unwrap(), bucket);
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.tsv");
        std::fs::write(&path, "#wrong\tv9\n").unwrap();
        assert!(matches!(
            read_event_feed(&path),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
