use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Utc, Weekday};
use serde::{Deserialize, Serialize};

use super::ScheduleError;

fn default_start() -> u32 {
    9
}
fn default_end() -> u32 {
    17
}

/// When a schedule fires. Zones are fixed UTC offsets in minutes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Cadence {
    /// Every `period_s` from `start_hour` until before `end_hour`, Monday
    /// to Friday.
    ContinuousBusinessHours {
        period_s: u64,
        #[serde(default)]
        utc_offset_minutes: i32,
        #[serde(default = "default_start")]
        start_hour: u32,
        #[serde(default = "default_end")]
        end_hour: u32,
    },
    /// Once a month on `day` (1..=28) at `hour:minute`.
    Monthly {
        day: u32,
        #[serde(default)]
        hour: u32,
        #[serde(default)]
        minute: u32,
        #[serde(default)]
        utc_offset_minutes: i32,
    },
    /// Every `period_s`, aligned to the Unix epoch.
    Interval { period_s: u64 },
}

impl Cadence {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::InvalidCadence(m.to_string()));
        let offset_ok = |o: i32| o.abs() < 24 * 60;
        match *self {
            Cadence::ContinuousBusinessHours {
                period_s,
                utc_offset_minutes,
                start_hour,
                end_hour,
            } => {
                if period_s == 0 {
                    return bad("period_s must be > 0");
                }
                if !(start_hour < end_hour && end_hour <= 24) {
                    return bad("need start_hour < end_hour <= 24");
                }
                if !offset_ok(utc_offset_minutes) {
                    return bad("utc_offset_minutes out of range");
                }
            }
            Cadence::Monthly {
                day,
                hour,
                minute,
                utc_offset_minutes,
            } => {
                if !(1..=28).contains(&day) {
                    return bad("day must be in 1..=28");
                }
                if hour > 23 || minute > 59 {
                    return bad("hour/minute out of range");
                }
                if !offset_ok(utc_offset_minutes) {
                    return bad("utc_offset_minutes out of range");
                }
            }
            Cadence::Interval { period_s } => {
                if period_s == 0 {
                    return bad("period_s must be > 0");
                }
            }
        }
        Ok(())
    }

    /// Earliest fire time at or after `t`.
    pub fn next_at_or_after(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        match *self {
            Cadence::Interval { period_s } => {
                let p = period_s as i64;
                let s = t.timestamp();
                let mut k = s.div_euclid(p) * p;
                if k < s || (k == s && t.timestamp_subsec_nanos() > 0) {
                    k += p;
                }
                Utc.timestamp_opt(k, 0).single().expect("in range")
            }
            Cadence::ContinuousBusinessHours {
                period_s,
                utc_offset_minutes,
                start_hour,
                end_hour,
            } => {
                let off = Duration::minutes(i64::from(utc_offset_minutes));
                let local = (t + off).naive_utc();
                let period = Duration::seconds(period_s as i64);
                let mut day = local.date();
                loop {
                    if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
                        let open = day.and_time(NaiveTime::from_hms_opt(start_hour, 0, 0).expect("valid hour"));
                        let close = open + Duration::hours(i64::from(end_hour - start_hour));
                        let candidate = if local <= open {
                            open
                        } else {
                            let since = (local - open).num_nanoseconds().expect("within a day");
                            let p = period.num_nanoseconds().expect("sane period");
                            let k = (since + p - 1) / p;
                            open + Duration::nanoseconds(k * p)
                        };
                        if candidate < close {
                            return to_utc(candidate, off);
                        }
                    }
                    day = day.succ_opt().expect("in range");
                }
            }
            Cadence::Monthly {
                day,
                hour,
                minute,
                utc_offset_minutes,
            } => {
                let off = Duration::minutes(i64::from(utc_offset_minutes));
                let local = (t + off).naive_utc();
                let at = |y: i32, m: u32| {
                    NaiveDate::from_ymd_opt(y, m, day)
                        .expect("day <= 28 exists in every month")
                        .and_time(NaiveTime::from_hms_opt(hour, minute, 0).expect("valid time"))
                };
                let (mut y, mut m) = (local.year(), local.month());
                loop {
                    let c = at(y, m);
                    if c >= local {
                        return to_utc(c, off);
                    }
                    if m == 12 {
                        y += 1;
                        m = 1;
                    } else {
                        m += 1;
                    }
                }
            }
        }
    }

    /// Earliest fire time in `(after, until]`, if any.
    pub fn fire_between(&self, after: DateTime<Utc>, until: DateTime<Utc>) -> Option<DateTime<Utc>> {
        let t = self.next_at_or_after(after + Duration::nanoseconds(1));
        (t <= until).then_some(t)
    }

    /// Every fire time in `[from, until)`.
    pub fn fires_in(&self, from: DateTime<Utc>, until: DateTime<Utc>) -> Vec<DateTime<Utc>> {
        let mut out = Vec::new();
        let mut t = self.next_at_or_after(from);
        while t < until {
            out.push(t);
            t = self.next_at_or_after(t + Duration::nanoseconds(1));
        }
        out
    }
}

fn to_utc(local: NaiveDateTime, off: Duration) -> DateTime<Utc> {
    Utc.from_utc_datetime(&(local - off))
}
